from __future__ import annotations

import copy
import logging
import logging.config
import os
from pathlib import Path

BASE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), os.path.pardir, os.path.pardir)
LOGS_DIR = os.path.join(BASE_DIR, "logs")
LOG_FILENAME = "arflow.log"
LOGGER_NAME = "arflow"

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {"simple": {"format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s"}},
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "level": "DEBUG",
            "formatter": "simple",
            "stream": "ext://sys.stdout",
        },
        "general_file": {
            "class": "logging.FileHandler",
            "level": "DEBUG",
            "formatter": "simple",
            "filename": os.path.join(LOGS_DIR, LOG_FILENAME),
        },
    },
    "loggers": {
        LOGGER_NAME: {
            "handlers": ["console", "general_file"],
            "level": "INFO",
        }
    },
}


def configure_logging(console_only: bool = False, log_dir: Path | str | None = None, level: str = "INFO") -> None:
    """Configures the package logger; the file handler lands in `log_dir` (defaults to ./logs next to the package)."""
    config = copy.deepcopy(LOGGING)
    config["loggers"][LOGGER_NAME]["level"] = level.upper()
    if console_only:
        del config["handlers"]["general_file"]
        config["loggers"][LOGGER_NAME]["handlers"] = ["console"]
        logging.config.dictConfig(config)
        return

    logs_dir = str(log_dir) if log_dir is not None else LOGS_DIR
    if not os.path.exists(logs_dir):
        os.makedirs(logs_dir)

    log_path = os.path.join(logs_dir, LOG_FILENAME)
    if not os.path.exists(log_path):
        open(log_path, "a").close()
    config["handlers"]["general_file"]["filename"] = log_path

    logging.config.dictConfig(config)


def get_logger() -> logging.Logger:
    return logging.getLogger(LOGGER_NAME)
