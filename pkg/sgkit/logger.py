"""
Centralized logging configuration for sgkit

Colour-coded console output with timestamps and module names. The default
level comes from the SGKIT_LOG_LEVEL environment variable (DEBUG, INFO,
WARNING, ERROR) and can be changed at runtime with set_global_level().

Usage:
    from sgkit.logger import get_logger

    logger = get_logger(__name__)
    logger.info("Selecting queries for image 3...")
    logger.warning("Empty interaction prompt set, falling back to object relevance")
"""

import logging
import os
import sys
from typing import Dict, Optional


class ColorCodes:
    """ANSI color codes for terminal output"""
    RESET = '\033[0m'
    BOLD = '\033[1m'

    RED = '\033[31m'
    GREEN = '\033[32m'
    YELLOW = '\033[33m'
    CYAN = '\033[36m'
    WHITE = '\033[37m'

    BG_RED = '\033[41m'


class ColoredFormatter(logging.Formatter):
    """
    Formatter that colours the level name and bolds the module name.

    The record is copied before decoration so that other handlers attached to
    the same logger (the plain file handler) never see escape codes.
    """

    LEVEL_COLORS = {
        logging.DEBUG: ColorCodes.CYAN,
        logging.INFO: ColorCodes.GREEN,
        logging.WARNING: ColorCodes.YELLOW,
        logging.ERROR: ColorCodes.RED,
        logging.CRITICAL: ColorCodes.BG_RED + ColorCodes.WHITE,
    }

    def format(self, record: logging.LogRecord) -> str:
        record = logging.makeLogRecord(record.__dict__)
        level_color = self.LEVEL_COLORS.get(record.levelno, ColorCodes.RESET)
        record.levelname = f"{level_color}{record.levelname}{ColorCodes.RESET}"
        record.name = f"{ColorCodes.BOLD}{record.name}{ColorCodes.RESET}"
        return super().format(record)


LOG_FORMAT = '[%(asctime)s] [%(levelname)s] [%(name)s] %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_loggers: Dict[str, logging.Logger] = {}


def parse_level(value: Optional[str], default: int = logging.INFO) -> int:
    """
    Translate a level name ("debug", "WARNING", ...) into a logging constant.

    Unknown or empty names fall back to `default`.
    """
    if not value:
        return default
    level = logging.getLevelName(value.strip().upper())
    return level if isinstance(level, int) else default


def _use_color() -> bool:
    if os.getenv('NO_COLOR'):
        return False
    return hasattr(sys.stdout, 'isatty') and sys.stdout.isatty()


def get_logger(
    name: str,
    level: Optional[int] = None,
    log_file: Optional[str] = None
) -> logging.Logger:
    """
    Get or create a logger with consistent formatting.

    Args:
        name: Logger name (usually __name__ from calling module)
        level: Logging level. Defaults to SGKIT_LOG_LEVEL, else INFO.
        log_file: Optional file path to write logs to (always at DEBUG)

    Returns:
        Configured logger instance
    """
    if name in _loggers:
        return _loggers[name]

    effective = level if level is not None else parse_level(os.getenv('SGKIT_LOG_LEVEL'))

    logger = logging.getLogger(name)
    logger.setLevel(effective)
    logger.propagate = False

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(effective)
    if _use_color():
        console_handler.setFormatter(ColoredFormatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    else:
        console_handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT))
        logger.addHandler(file_handler)
        logger.setLevel(logging.DEBUG)

    _loggers[name] = logger
    return logger


def set_global_level(level: int) -> None:
    """
    Set logging level for all existing loggers and their console handlers.

    Example:
        set_global_level(logging.DEBUG)
    """
    for logger in _loggers.values():
        logger.setLevel(level)
        for handler in logger.handlers:
            if not isinstance(handler, logging.FileHandler):
                handler.setLevel(level)
