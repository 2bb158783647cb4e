"""Worker-count resolution and an order-preserving parallel map."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

ENV_VAR = "FILAMENT_SR_WORKERS"


def resolve_workers(configured: int = 1) -> int:
    """``FILAMENT_SR_WORKERS`` wins over the configured count when set."""
    raw = os.environ.get(ENV_VAR)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{ENV_VAR} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{ENV_VAR} must be >= 1, got {n}")
        return n
    return max(1, int(configured))


def parallel_map(fn, items, workers: int = 1) -> list:
    """Ordered map; results come back in input order whatever the worker count."""
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
