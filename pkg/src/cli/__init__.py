"""Command-line interface and invariant suites."""
