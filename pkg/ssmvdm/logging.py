"""Structured logging for ssmvdm.

JSON-line logs built on structlog, with run-scoped context (run id, command,
seed) carried in context variables and an operation timer that records
duration and outcome.
"""

import logging
import logging.handlers
import sys
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, Optional

import structlog


@dataclass
class LogMetrics:
    """Timing record for one operation."""

    operation: str
    start_time: float
    end_time: Optional[float] = None
    duration_ms: Optional[float] = None
    success: bool = False
    error: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def complete(self, success: bool = True, error: Optional[str] = None) -> None:
        """Mark operation as complete."""
        self.end_time = time.perf_counter()
        self.duration_ms = (self.end_time - self.start_time) * 1000
        self.success = success
        self.error = error


def setup_logging(
    level: str = "INFO",
    log_file: Optional[str] = None,
    json_format: bool = True,
    max_bytes: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 5,
) -> None:
    """Configure structured logging.

    Args:
        level: Log level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_file: Optional path of a rotating log file
        json_format: Render JSON lines; otherwise a human-readable console format
        max_bytes: Maximum file size before rotation
        backup_count: Number of rotated files to keep
    """
    log_level = getattr(logging, level.upper(), logging.INFO)

    shared_processors: list[Any] = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_log_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.TimeStamper(fmt="iso", utc=True),
    ]
    renderer: Any = (
        structlog.processors.JSONRenderer()
        if json_format
        else structlog.dev.ConsoleRenderer(colors=False)
    )

    root_logger = logging.getLogger()
    for handler in root_logger.handlers[:]:
        root_logger.removeHandler(handler)
    root_logger.setLevel(log_level)

    formatter = structlog.stdlib.ProcessorFormatter(
        foreign_pre_chain=shared_processors,
        processors=[
            structlog.stdlib.ProcessorFormatter.remove_processors_meta,
            structlog.processors.format_exc_info,
            renderer,
        ],
    )

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(formatter)
    console_handler.setLevel(log_level)
    root_logger.addHandler(console_handler)

    if log_file:
        log_path = Path(log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            log_path, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8"
        )
        file_handler.setFormatter(formatter)
        file_handler.setLevel(log_level)
        root_logger.addHandler(file_handler)

    structlog.configure(
        processors=[
            *shared_processors,
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )


def get_logger(name: str) -> Any:
    """Return a structlog logger bound to a module name."""
    return structlog.get_logger(name)


def bind_run_context(command: str, seed: Optional[int] = None, run_id: Optional[str] = None) -> str:
    """Attach run-scoped fields to every record emitted from now on.

    Returns:
        The run id in effect
    """
    run_id = run_id or generate_run_id()
    fields: Dict[str, Any] = {"run_id": run_id, "command": command}
    if seed is not None:
        fields["seed"] = seed
    structlog.contextvars.bind_contextvars(**fields)
    return run_id


def clear_run_context() -> None:
    """Drop run-scoped fields."""
    structlog.contextvars.clear_contextvars()


def generate_run_id() -> str:
    """Generate a unique id for a run."""
    return uuid.uuid4().hex[:12]


@contextmanager
def log_operation(logger: Any, operation: str, **metadata: Any) -> Iterator[LogMetrics]:
    """Time an operation and log its outcome.

    Example:
        >>> with log_operation(logger, "train", steps=2000):
        ...     run_training(...)
    """
    metrics = LogMetrics(operation=operation, start_time=time.perf_counter(), metadata=metadata)
    logger.debug("operation_started", operation=operation, **metadata)
    try:
        yield metrics
        metrics.complete(success=True)
    except Exception as e:
        metrics.complete(success=False, error=str(e))
        raise
    finally:
        logger.info(
            "operation_completed",
            operation=operation,
            duration_ms=round(metrics.duration_ms or 0.0, 3),
            success=metrics.success,
            error=metrics.error,
            **metadata,
        )
