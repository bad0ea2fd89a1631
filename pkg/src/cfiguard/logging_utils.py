from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
import os
import sys

from .config import PipelineConfig

LOGGER_NAME = "cfiguard"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def _file_handler(logger: logging.Logger) -> RotatingFileHandler | None:
    for handler in logger.handlers:
        if isinstance(handler, RotatingFileHandler):
            return handler
    return None


def setup_logging(config: PipelineConfig) -> logging.Logger:
    """Configure the package logger: rotating file under the runtime dir, console on stderr.

    Calling it again with a different runtime dir moves the file handler; the console
    handler is installed once.
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, config.log_level, logging.INFO))
    logger.propagate = False
    formatter = logging.Formatter(LOG_FORMAT)

    current = _file_handler(logger)
    log_path = os.path.abspath(config.runtime.log_path)
    if current is not None and current.baseFilename == log_path:
        return logger
    if current is not None:
        logger.removeHandler(current)
        current.close()

    file_handler = RotatingFileHandler(
        log_path,
        maxBytes=config.log_max_bytes,
        backupCount=config.log_backup_count,
        encoding="utf-8",
    )
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)

    if not any(type(handler) is logging.StreamHandler for handler in logger.handlers):
        # stdout carries command results.
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)
    return logger
