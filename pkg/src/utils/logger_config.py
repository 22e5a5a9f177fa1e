"""
Logging configuration
Structured logging with rotation, separate error log, and run/task/trial context
"""
import json
import logging
import logging.handlers
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

# Record attributes rendered by both formatters when present
CONTEXT_FIELDS = ("run_id", "task", "trial", "iteration", "duration_ms")

LOG_FORMAT = "%(asctime)s | %(levelname)-8s | %(name)s | %(module)s.%(funcName)s:%(lineno)d | %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class JSONFormatter(logging.Formatter):
    """One JSON object per record"""

    def format(self, record: logging.LogRecord) -> str:
        log_data = {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
            "message": record.getMessage(),
            "process_id": record.process,
        }

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        for name in CONTEXT_FIELDS:
            if hasattr(record, name):
                log_data[name] = getattr(record, name)

        return json.dumps(log_data, ensure_ascii=False, default=str)


class ContextualFormatter(logging.Formatter):
    """Pipe-separated text format with a trailing context block"""

    def format(self, record: logging.LogRecord) -> str:
        context_parts = []
        for name in CONTEXT_FIELDS:
            if hasattr(record, name):
                value = getattr(record, name)
                if name == "duration_ms":
                    context_parts.append(f"duration={value}ms")
                else:
                    context_parts.append(f"{name}={value}")

        # Exception text is appended by the base class
        msg = super().format(record)
        if context_parts:
            first, sep, rest = msg.partition("\n")
            msg = first + " | " + " | ".join(context_parts) + sep + rest
        return msg


class ContextualLoggerAdapter(logging.LoggerAdapter):
    """Logger adapter that merges a fixed context into every record"""

    def __init__(self, logger: logging.Logger, context: Optional[Dict[str, Any]] = None):
        super().__init__(logger, context or {})

    def process(self, msg: str, kwargs: Dict[str, Any]) -> tuple:
        extra = dict(kwargs.get("extra") or {})
        for key, value in self.extra.items():
            extra.setdefault(key, value)
        kwargs["extra"] = extra
        return msg, kwargs

    def bind(self, **context) -> "ContextualLoggerAdapter":
        """Child adapter carrying additional context"""
        merged = dict(self.extra)
        merged.update(context)
        return ContextualLoggerAdapter(self.logger, merged)


def setup_logging(
    log_level: str = "INFO",
    log_dir: str = "logs",
    log_file: str = "throw_assist.log",
    json_logging: bool = False,
    max_bytes: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 10,
    verbose: bool = False
) -> logging.Logger:
    """
    Configure the root logger for one CLI run

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for log files
        log_file: Name of the log file
        json_logging: Enable JSON structured logging
        max_bytes: Maximum size of log file before rotation
        backup_count: Number of backup log files to keep
        verbose: Enable verbose (DEBUG) logging and console output

    Returns:
        Configured logger instance
    """
    level = logging.DEBUG if verbose else getattr(logging, log_level.upper(), logging.INFO)

    log_path = Path(log_dir)
    log_path.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    if json_logging:
        formatter: logging.Formatter = JSONFormatter()
    else:
        formatter = ContextualFormatter(fmt=LOG_FORMAT, datefmt=DATE_FORMAT)

    # Console stays quiet unless verbose; stdout carries the run summary
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(level if verbose else logging.ERROR)
    console_handler.setFormatter(formatter)
    root_logger.addHandler(console_handler)

    file_handler = logging.handlers.RotatingFileHandler(
        log_path / log_file,
        maxBytes=max_bytes,
        backupCount=backup_count,
        encoding="utf-8"
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(formatter)
    root_logger.addHandler(file_handler)

    error_handler = logging.handlers.RotatingFileHandler(
        log_path / f"error_{log_file}",
        maxBytes=max_bytes,
        backupCount=backup_count,
        encoding="utf-8"
    )
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(formatter)
    root_logger.addHandler(error_handler)

    logger = logging.getLogger(__name__)
    logger.info(
        f"Logging initialized: level={logging.getLevelName(level)}, "
        f"log_dir={log_dir}, json_logging={json_logging}"
    )
    return logger


def get_logger(name: str, context: Optional[Dict[str, Any]] = None) -> ContextualLoggerAdapter:
    """
    Get a logger with optional context

    Args:
        name: Logger name (typically __name__)
        context: Optional context dictionary (run_id, task, trial)

    Returns:
        ContextualLoggerAdapter instance
    """
    return ContextualLoggerAdapter(logging.getLogger(name), context)


class PerformanceLogger:
    """Context manager timing one pipeline stage"""

    def __init__(self, logger, operation: str, **context):
        self.logger = logger
        self.operation = operation
        self.context = context
        self.start_time: Optional[float] = None
        self.duration_ms: Optional[int] = None

    def __enter__(self):
        self.start_time = time.perf_counter()
        self.logger.debug(f"Starting {self.operation}", extra=self.context)
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is None:
            return False
        self.duration_ms = int((time.perf_counter() - self.start_time) * 1000)
        context = dict(self.context)
        context["duration_ms"] = self.duration_ms

        if exc_type is None:
            self.logger.info(f"Completed {self.operation}", extra=context)
        else:
            self.logger.error(
                f"Failed {self.operation}",
                extra=context,
                exc_info=(exc_type, exc_val, exc_tb)
            )
        return False
