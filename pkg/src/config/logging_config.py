import logging
import sys
from pathlib import Path
from typing import List

from src.config.settings import LOG_LEVEL

CONSOLE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
FILE_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'
PROJECT_PREFIX = "src."


def setup_logger(name: str = "dyadic_rearrangement", log_file: str = None) -> logging.Logger:
    """
    Configure one module logger of the reduction pipeline.

    Console records go to stderr at LOG_LEVEL (DYADIC_LOG_LEVEL in the
    environment, INFO by default) because stdout carries the written output
    paths and the JSON lines of `verify`. Loggers do not propagate, so
    calling this twice for a name never duplicates records. A log file
    receives every DEBUG record with the emitting function and line.

    Args:
        name: Logger name, normally the module's __name__
        log_file: Optional log file path. If None, only the stderr handler is attached.

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(logging.DEBUG if log_file else LOG_LEVEL)

    logger.handlers.clear()
    logger.propagate = False

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(LOG_LEVEL)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(console_handler)

    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(file_handler)

    return logger


def attach_log_file(log_file: str) -> List[str]:
    """
    Send every project logger created so far to log_file as well (the CLI's --log-file).

    Module loggers are created at import time, before arguments are parsed,
    so they are rebuilt here rather than configured up front.

    Returns:
        Names of the loggers that now write to the file
    """
    names = [name for name in list(logging.root.manager.loggerDict) if name.startswith(PROJECT_PREFIX)]
    for name in names:
        setup_logger(name, log_file)
    return names
