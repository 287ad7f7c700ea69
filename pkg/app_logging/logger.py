"""
Structured Logging Module
Using structlog for all run diagnostics

Features:
- JSON or console rendering (LOG_FORMAT)
- Context propagation (study / radius bound via contextvars)
- Performance tracking (LogTimer)

Logs go to stderr; stdout is reserved for the CLI's error document.
"""

import logging
import sys
import time
from datetime import datetime, timezone

import structlog

from config.settings import settings


# ============================================================================
# STRUCTLOG CONFIGURATION
# ============================================================================

def add_timestamp(logger, method_name, event_dict):
    """Add ISO timestamp to log entries"""
    event_dict["timestamp"] = datetime.now(timezone.utc).isoformat().replace("+00:00", "Z")
    return event_dict


def round_floats(logger, method_name, event_dict):
    """Keep float context readable in console output"""
    for key, value in event_dict.items():
        if isinstance(value, float):
            event_dict[key] = float(f"{value:.6g}")
    return event_dict


structlog.configure(
    processors=[
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.filter_by_level,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        add_timestamp,
        round_floats,
        structlog.stdlib.PositionalArgumentsFormatter(),
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
        structlog.processors.UnicodeDecoder(),
        structlog.processors.JSONRenderer() if settings.LOG_FORMAT == "json"
        else structlog.dev.ConsoleRenderer(colors=False)
    ],
    context_class=dict,
    logger_factory=structlog.stdlib.LoggerFactory(),
    cache_logger_on_first_use=True,
)


# ============================================================================
# LOGGER FACTORY
# ============================================================================

def get_logger(name: str = None) -> structlog.BoundLogger:
    """
    Get a structured logger instance.

    Usage:
        logger = get_logger(__name__)
        logger.info("mesh_built", tets=60, vertices=24)

    Args:
        name: Logger name (typically __name__)

    Returns:
        Configured structlog logger
    """
    logging.basicConfig(
        format="%(message)s",
        stream=sys.stderr,
        level=getattr(logging, settings.LOG_LEVEL.upper())
    )

    return structlog.get_logger(name)


def bind_context(**kwargs) -> None:
    """Bind key/values to every log entry of the current context."""
    structlog.contextvars.bind_contextvars(**kwargs)


def clear_context() -> None:
    structlog.contextvars.clear_contextvars()


# ============================================================================
# PERFORMANCE LOGGING
# ============================================================================

class LogTimer:
    """
    Context manager for timing operations.

    Usage:
        with LogTimer("assemble", dofs=12345):
            system = assemble(mesh, params)

    The measured duration is available as ``elapsed`` after exit.
    """

    def __init__(self, operation: str, **kwargs):
        self.operation = operation
        self.context = kwargs
        self.logger = get_logger("performance")
        self.start_time = None
        self.elapsed = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        self.logger.info(
            f"{self.operation}_started",
            **self.context
        )
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.elapsed = time.perf_counter() - self.start_time

        if exc_type:
            self.logger.error(
                f"{self.operation}_failed",
                duration_ms=round(self.elapsed * 1000, 2),
                error_type=exc_type.__name__,
                error=str(exc_val),
                **self.context
            )
        else:
            self.logger.info(
                f"{self.operation}_completed",
                duration_ms=round(self.elapsed * 1000, 2),
                **self.context
            )
