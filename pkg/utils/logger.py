"""
Logging for the fusion toolkit.

Every module calls setup_logger(__name__) at import. Records go to stderr so
the CLI can print tables on stdout; the CLI's --log-level is applied afterwards
through set_global_level.
"""
import logging
import os
import sys
from typing import Optional

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def _resolve_level(log_level: Optional[str]) -> int:
    if log_level is None:
        # a bad LOG_LEVEL is reported by Config.validate, not at import
        env_level = os.getenv("LOG_LEVEL", "INFO").upper()
        return getattr(logging, env_level if env_level in LEVELS else "INFO")
    name = log_level.upper()
    if name not in LEVELS:
        raise ValueError(f"log level must be one of {', '.join(LEVELS)}, got {log_level!r}")
    return getattr(logging, name)


def setup_logger(name: str, log_level: Optional[str] = None) -> logging.Logger:
    """
    Module logger with a single stderr handler.

    Args:
        name: Logger name (usually __name__)
        log_level: One of LEVELS; LOG_LEVEL from the environment when omitted

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    # Avoid duplicate handlers
    if logger.handlers:
        return logger

    level = _resolve_level(log_level)
    logger.setLevel(level)
    logger.propagate = False

    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    logger.addHandler(handler)

    return logger


def set_global_level(log_level: str) -> None:
    """Apply a log level to every logger created through setup_logger."""
    level = _resolve_level(log_level)
    for logger in logging.Logger.manager.loggerDict.values():
        if isinstance(logger, logging.Logger) and logger.handlers:
            logger.setLevel(level)
            for handler in logger.handlers:
                handler.setLevel(level)
