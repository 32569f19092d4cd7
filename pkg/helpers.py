import hashlib
import json
import logging
import random
import subprocess
from logging.handlers import TimedRotatingFileHandler
from os import environ
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from dotenv import load_dotenv
from pydantic import BaseModel


"""
This module contains helper classes for logging, run stamping and seeding, plus the settings read from the environment.
"""

# Load .env file which may contain the cache directory
# and store in OS user environment variables
load_dotenv()

CACHE_DIR_VARIABLE = "WEAKGROUND_CACHE_DIR"
DEFAULT_CACHE_DIR = ".weakground_cache"


def cache_dir() -> Path:
    """
    The cache directory as currently configured in the environment.
    """
    return Path(environ.get(CACHE_DIR_VARIABLE, DEFAULT_CACHE_DIR))


LOG_FORMAT = "[{asctime}] [{levelname:<8}] {name}: {message}"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class LogHelper:
    """
    A helper class for logging operations.

    This class provides methods to check if a logger exists, and create a logger with a file handler and a stream handler,
    with the handler settings described by small pydantic models.

    Methods:
        logger_exists(logger_name): Checks if a logger with the given name exists.
        create_logger(log): Creates a logger from a handler description.
    """

    class HandlerBase(BaseModel):
        logger_name: str
        log_file: str

    class FileAndStreamHandler(HandlerBase):
        file_log_level: Optional[int] = logging.INFO
        stream_log_level: Optional[int] = logging.ERROR

    class TimedRotatingFileAndStreamHandler(FileAndStreamHandler):
        interval: Optional[str] = "midnight"
        backup_count: Optional[int] = 7

    def __init__(self, log_root: Optional[Path] = None):
        self.log_root = cache_dir() / "logs" if log_root is None else Path(log_root)

    def logger_exists(self, logger_name: str) -> bool:
        """
        Checks if a logger with the given name exists.

        Args:
            logger_name (str): The name of the logger to check.

        Returns:
            bool: True if a logger with the given name exists, False otherwise.
        """
        return logger_name in logging.Logger.manager.loggerDict

    def create_logger(
        self, log: FileAndStreamHandler | TimedRotatingFileAndStreamHandler
    ) -> logging.Logger:
        """
        Creates a logger with the given name and log file.

        The log file path is taken relative to the log root. If the logger already exists,
        it is returned without any changes.

        Args:
            log (FileAndStreamHandler | TimedRotatingFileAndStreamHandler): The handler description.

        Returns:
            logging.Logger: The created logger.
        """
        if self.logger_exists(log.logger_name):
            return logging.getLogger(log.logger_name)

        log_file = self.log_root / log.log_file
        log_file.parent.mkdir(parents=True, exist_ok=True)

        logger = logging.getLogger(log.logger_name)
        logger.setLevel(logging.DEBUG)
        logger.propagate = False

        logger.addHandler(self._create_stream_handler(log.stream_log_level))

        # The timed variant subclasses the plain one, so it has to be checked first
        if isinstance(log, self.TimedRotatingFileAndStreamHandler):
            logger.addHandler(
                self._create_timed_rotating_file_handler(
                    str(log_file),
                    log.file_log_level,
                    log.interval,
                    log.backup_count,
                )
            )
        else:
            logger.addHandler(
                self._create_file_handler(str(log_file), log.file_log_level)
            )

        return logger

    @staticmethod
    def _formatter() -> logging.Formatter:
        return logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT, style="{")

    def _create_file_handler(self, log_file: str, level: int) -> logging.FileHandler:
        handler = logging.FileHandler(filename=log_file, encoding="utf-8", mode="a")
        handler.setFormatter(self._formatter())
        handler.setLevel(level)
        return handler

    def _create_stream_handler(self, level: int) -> logging.StreamHandler:
        handler = logging.StreamHandler()
        handler.setFormatter(self._formatter())
        handler.setLevel(level)
        return handler

    def _create_timed_rotating_file_handler(
        self, log_file: str, level: int, interval: str, backup_count: int
    ) -> TimedRotatingFileHandler:
        """
        Creates a logging TimedRotatingFileHandler with the specified log file, level, interval, and backup count.

        Args:
            log_file (str): The path and name of the log file to create.
            level (int): The log level for the file handler.
            interval (str): The interval at which log files should be rotated (e.g., 'midnight').
            backup_count (int): The number of backup log files to keep.

        Returns:
            logging.handlers.TimedRotatingFileHandler: The created handler.
        """
        handler = TimedRotatingFileHandler(
            filename=log_file,
            when=interval,
            backupCount=backup_count,
            encoding="utf-8",
            delay=True,
        )
        handler.setFormatter(self._formatter())
        handler.setLevel(level)
        return handler


class MiscHelper:
    """
    A helper class that provides miscellaneous utility functions.

    methods:
        code_version(): Returns a version string for the running code.
        config_hash(config): Hashes the hyperparameter part of a configuration.
        seed_everything(seed): Seeds python, numpy and torch.
        remaining_time(seconds): Formats a number of seconds as the time left.
    """

    FALLBACK_VERSION = "0+unknown"

    def code_version(self) -> str:
        """
        Gets a version string for the code, based on the number of commits in the git repository.

        Returns:
            str: "r<commit count>", or a fallback when not inside a git checkout.
        """
        try:
            count = subprocess.check_output(
                ["git", "rev-list", "--count", "HEAD"],
                stderr=subprocess.DEVNULL,
                cwd=Path(__file__).parent,
            )
            return f"r{int(count.decode().strip())}"
        except (subprocess.CalledProcessError, FileNotFoundError, ValueError):
            return self.FALLBACK_VERSION

    def config_hash(self, config: BaseModel | dict[str, Any]) -> str:
        """
        Hashes a configuration by its canonical JSON form.

        Args:
            config (BaseModel | dict): The configuration to hash.

        Returns:
            str: The first 16 hex characters of the SHA-256 digest.
        """
        if isinstance(config, BaseModel):
            config = config.model_dump(mode="json")
        canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def seed_everything(self, seed: int) -> None:
        random.seed(seed)
        np.random.seed(seed % 2**32)
        torch.manual_seed(seed)

    def remaining_time(self, seconds: float) -> str:
        """
        Converts the given number of seconds into a formatted string representing the remaining time.

        Args:
            seconds (float): The number of seconds; negative values count as 0.

        Returns:
            str: "MM:SS", or "H:MM:SS" from one hour up.
        """
        minutes, seconds = divmod(max(0, round(seconds)), 60)
        hours, minutes = divmod(minutes, 60)
        if hours:
            return f"{hours}:{minutes:02d}:{seconds:02d}"
        return f"{minutes:02d}:{seconds:02d}"

