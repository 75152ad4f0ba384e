"""Worker-count policy shared by the parallel stages.

LANGFIELD_THREADS unset -> 1 worker (bit-reproducible default);
"0" -> all cores; any other integer -> that many workers.
"""
from __future__ import annotations

import os

from .errors import ConfigError

ENV_VAR = "LANGFIELD_THREADS"


def worker_count() -> int:
    raw = os.environ.get(ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{ENV_VAR} must be an integer, got {raw!r}")
    if n < 0:
        raise ConfigError(f"{ENV_VAR} must be >= 0, got {n}")
    if n == 0:
        return os.cpu_count() or 1
    return n


def split_ranges(n: int, workers: int) -> list[tuple[int, int]]:
    """Contiguous near-equal [start, end) ranges; fixed split for determinism."""
    workers = max(1, min(workers, n)) if n > 0 else 1
    base, extra = divmod(n, workers)
    ranges, start = [], 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        ranges.append((start, start + size))
        start += size
    return ranges
