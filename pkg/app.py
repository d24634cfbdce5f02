"""
Main application entry point for dyadic-rearrangement.
Run `python app.py <subcommand> ...`; `python app.py --help` lists the subcommands.
"""

import sys

from src.cli.main import main

if __name__ == "__main__":
    sys.exit(main())
