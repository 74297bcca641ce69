"""
Logging utilities for the health telemetry data fabric.
"""
import logging
import os
import sys
from datetime import datetime
from functools import wraps
from typing import Optional

from pythonjsonlogger import jsonlogger

from config import Config


class CustomFormatter(logging.Formatter):
    """Custom formatter with colors for different log levels."""

    # Color codes
    COLORS = {
        'DEBUG': '\033[36m',    # Cyan
        'INFO': '\033[32m',     # Green
        'WARNING': '\033[33m',  # Yellow
        'ERROR': '\033[31m',    # Red
        'CRITICAL': '\033[35m', # Magenta
        'RESET': '\033[0m'      # Reset
    }

    def format(self, record):
        levelname = record.levelname
        color = self.COLORS.get(levelname, self.COLORS['RESET'])
        record.levelname = f"{color}{levelname}{self.COLORS['RESET']}"
        try:
            return super().format(record)
        finally:
            record.levelname = levelname


def setup_logger(name: str = __name__, level: Optional[str] = None,
                 log_format: Optional[str] = None, log_dir: Optional[str] = None) -> logging.Logger:
    """
    Set up a logger with appropriate handlers and formatting.

    Diagnostics always go to stderr; stdout is reserved for command output.

    Args:
        name: Logger name
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_format: 'text' or 'json'
        log_dir: Directory for the warning-level file log (optional)

    Returns:
        Configured logger instance
    """
    log_level = (level or Config.LOG_LEVEL).upper()
    log_format = log_format or Config.LOG_FORMAT
    log_dir = log_dir if log_dir is not None else Config.LOG_DIR

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, log_level, logging.INFO))

    # Avoid adding handlers multiple times
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, log_level, logging.INFO))

    if log_format == 'json':
        formatter = jsonlogger.JsonFormatter(
            fmt='%(asctime)s %(name)s %(levelname)s %(message)s',
            rename_fields={'asctime': 'time', 'levelname': 'level'},
        )
    elif sys.stderr.isatty():
        formatter = CustomFormatter(
            fmt='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
    else:
        formatter = logging.Formatter(
            fmt='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.FileHandler(
            os.path.join(log_dir, f'fabric_{datetime.now().strftime("%Y%m%d")}.log')
        )
        file_handler.setLevel(logging.WARNING)
        file_handler.setFormatter(logging.Formatter(
            fmt='%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        ))
        logger.addHandler(file_handler)

    return logger


def log_function_call(func):
    """
    Decorator to log function calls and execution time.

    Only argument types are logged, never values (payloads may carry PHI).
    """
    @wraps(func)
    def wrapper(*args, **kwargs):
        logger = logging.getLogger(func.__module__)
        start_time = datetime.now()

        logger.debug(f"Starting {func.__qualname__} with {len(args)} args, kwargs={sorted(kwargs)}")

        try:
            result = func(*args, **kwargs)
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.debug(f"Completed {func.__qualname__} in {execution_time:.3f}s")
            return result

        except Exception as e:
            execution_time = (datetime.now() - start_time).total_seconds()
            logger.debug(f"Error in {func.__qualname__} after {execution_time:.3f}s: {type(e).__name__}: {e}")
            raise

    return wrapper


class ErrorHandler:
    """Centralized error handling utilities."""

    def __init__(self, logger: logging.Logger):
        self.logger = logger

    def handle_fabric_error(self, error: Exception, context: str = "") -> dict:
        """
        Handle fabric errors.

        Args:
            error: Exception that occurred
            context: Additional context information

        Returns:
            Standardized error response
        """
        # Imported here so utils stays importable without src on the path
        from src.errors import FabricError

        if isinstance(error, FabricError):
            if error.exit_code == 3:
                self.logger.error(f"Fabric I/O error {context}: {error}")
            else:
                self.logger.warning(f"Fabric error {context}: {error}")
            response = {
                'success': False,
                'error': error.message,
                'error_type': error.code,
                'context': context,
                'status': error.http_status,
                'exit_code': error.exit_code,
            }
            if error.details:
                response['details'] = error.details
            return response

        return self.handle_general_error(error, context)

    def handle_general_error(self, error: Exception, context: str = "") -> dict:
        """
        Handle general application errors.

        Args:
            error: Exception that occurred
            context: Additional context information

        Returns:
            Standardized error response
        """
        error_msg = str(error)
        if isinstance(error, OSError):
            self.logger.error(f"I/O error {context}: {error_msg}")
            return {
                'success': False,
                'error': f"I/O error: {error_msg}",
                'error_type': 'STORAGE_IO',
                'context': context,
                'status': 500,
                'exit_code': 3,
            }

        self.logger.error(f"General error {context}: {error_msg}")

        return {
            'success': False,
            'error': f"An unexpected error occurred: {error_msg}",
            'error_type': 'general_error',
            'context': context,
            'status': 500,
            'exit_code': 1,
        }


def create_error_handler(logger_name: str = __name__) -> ErrorHandler:
    """
    Create an error handler with a logger.

    Args:
        logger_name: Name for the logger

    Returns:
        ErrorHandler instance
    """
    logger = setup_logger(logger_name)
    return ErrorHandler(logger)


# Global logger instance
app_logger = logging.getLogger('fabric')


def log_ingest_outcome(task_id: str, status: str, entry_id: Optional[str], mode: str):
    """Log a gateway decision (never the payload)."""
    app_logger.info(
        f"Ingest {mode} - Task: {task_id}, Status: {status}, Entry: {entry_id or '-'}"
    )


def log_promotion(promoted: int, skipped: int):
    """Log a promotion batch."""
    app_logger.info(f"Promotion - Promoted: {promoted}, Skipped: {skipped}")


def log_publish(environment: str, dataset_id: str, row_count: int, reused: bool):
    """Log an outbound publish."""
    app_logger.info(
        f"Outbound publish - Env: {environment}, Dataset: {dataset_id}, "
        f"Rows: {row_count}, {'unchanged' if reused else 'written'}"
    )


def log_run_outcome(pipeline_id: str, run_id: str, outcome: str, elapsed: float):
    """Log a finished pipeline run."""
    level = logging.INFO if outcome == 'succeeded' else logging.WARNING
    app_logger.log(
        level,
        f"Pipeline run - Pipeline: {pipeline_id}, Run: {run_id}, Outcome: {outcome}, "
        f"Time: {elapsed:.2f}s"
    )
