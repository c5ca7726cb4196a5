"""
Centralized logging with an in-memory message buffer.
"""

import logging
import os
import sys
import traceback
from datetime import datetime
from typing import List, Tuple


class Logger:
    """
    Centralized logger for every pipeline stage.
    Console output goes through the stdlib logging package; the last
    messages are also kept in memory so tests and the CLI can inspect them.
    """

    def __init__(self, name: str = "lagat"):
        self.messages: List[Tuple[str, str, float]] = []
        self.max_messages = 100

        # Quiet mode for CI runs (warnings and errors only)
        self.quiet_mode = os.getenv('LAGAT_QUIET', 'false').lower() == 'true'

        self._logger = logging.getLogger(name)
        self._logger.propagate = False
        if not self._logger.handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter("[%(asctime)s] [%(levelname)s] %(message)s", "%H:%M:%S"))
            self._logger.addHandler(handler)
        self._logger.setLevel(logging.WARNING if self.quiet_mode else logging.INFO)

    def set_quiet(self, quiet: bool) -> None:
        """Toggle quiet mode at runtime."""
        self.quiet_mode = quiet
        self._logger.setLevel(logging.WARNING if quiet else logging.INFO)

    def debug(self, msg: str):
        """Log debug message."""
        self._log(logging.DEBUG, "DEBUG", msg)

    def info(self, msg: str):
        """Log info message."""
        self._log(logging.INFO, "INFO", msg)

    def warning(self, msg: str):
        """Log warning message."""
        self._log(logging.WARNING, "WARNING", msg)

    def error(self, msg: str):
        """Log error message."""
        self._log(logging.ERROR, "ERROR", msg)

    def critical(self, msg: str):
        """Log critical message."""
        self._log(logging.CRITICAL, "CRITICAL", msg)

    def _log(self, level: int, name: str, msg: str):
        """Internal log function."""
        self.messages.append((name, msg, datetime.now().timestamp()))

        if len(self.messages) > self.max_messages:
            self.messages = self.messages[-self.max_messages:]

        self._logger.log(level, msg)


# Global logger instance
logger = Logger()


def log_exception(exc_type, exc_value, exc_traceback):
    """Global exception handler."""
    if exc_type is KeyboardInterrupt:
        return

    tb_text = "".join(traceback.format_exception(exc_type, exc_value, exc_traceback))

    logger.critical(f"Unhandled exception: {exc_value}")
    print("\n" + "=" * 70, file=sys.stderr)
    print(" UNHANDLED EXCEPTION", file=sys.stderr)
    print("=" * 70, file=sys.stderr)
    print(tb_text, file=sys.stderr)
    print("=" * 70, file=sys.stderr)


def install_exception_hook() -> None:
    """Install the global exception handler (CLI entry point only)."""
    sys.excepthook = log_exception
