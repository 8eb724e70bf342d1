"""
Utility functions shared across the gateway emulator.
"""

import json
import logging
import math
import sys
import zlib
from typing import Any, List, Sequence, Union

import orjson
import structlog

logger = structlog.get_logger(__name__)


def configure_logging(level: str = "INFO", json_output: bool = False) -> None:
    """Configure structlog for CLI and service use."""
    numeric_level = logging.getLevelName(level.upper())
    if not isinstance(numeric_level, int):
        raise ValueError(f"Unknown log level: {level}")

    renderer = (
        structlog.processors.JSONRenderer(serializer=lambda obj, **_: orjson.dumps(obj).decode())
        if json_output
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            renderer,
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )


def dumps(data: Any) -> bytes:
    """Serialize to compact JSON bytes, keeping dict insertion order."""
    return orjson.dumps(data)


def safe_json_parse(data: Union[str, bytes], default: Any = None, silent: bool = True) -> Any:
    """
    Parse JSON with orjson, falling back to the standard library decoder.
    Returns ``default`` when the payload is empty or not JSON.
    """
    if not data or not data.strip():
        return default

    try:
        return orjson.loads(data)
    except (orjson.JSONDecodeError, ValueError):
        try:
            return json.loads(data)
        except (json.JSONDecodeError, ValueError, UnicodeDecodeError) as error:
            if not silent:
                logger.warning("Failed to parse JSON", data=str(data[:100]), error=str(error))
            return default


def stable_bucket(key: str, buckets: int) -> int:
    """Map ``key`` to one of ``buckets`` slots, identically across runs and processes."""
    if buckets <= 0:
        raise ValueError("buckets must be positive")
    return zlib.crc32(key.encode("utf-8")) % buckets


def format_sim_time(ms: int) -> str:
    """Render a virtual-clock reading, e.g. ``250ms``, ``1.500s`` or ``1h 02m 03.004s``."""
    if ms < 0:
        raise ValueError("virtual time is never negative")
    ms = int(ms)
    if ms < 1000:
        return f"{ms}ms"
    minutes, ms = divmod(ms, 60_000)
    hours, minutes = divmod(minutes, 60)
    seconds, ms = divmod(ms, 1000)
    if hours:
        return f"{hours}h {minutes:02d}m {seconds:02d}.{ms:03d}s"
    if minutes:
        return f"{minutes}m {seconds:02d}.{ms:03d}s"
    return f"{seconds}.{ms:03d}s"


def percentile(values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile of ``values``."""
    if not values:
        raise ValueError("percentile of an empty sequence")
    ordered: List[float] = sorted(values)
    rank = max(1, math.ceil(pct / 100 * len(ordered)))
    return ordered[rank - 1]
