"""Chunked, thread-pooled evaluation over voxel rows.

Chunk boundaries are fixed and independent of the worker count, and partial
results are combined in chunk order, so every result is bit-identical for any
number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

import numpy as np

CHUNK_ROWS = 4096

_threads: int | None = None


def default_threads() -> int:
    env = os.environ.get("SPECMIX_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def set_threads(n: int | None) -> None:
    """Set the process-wide worker count (``None`` restores the default)."""
    global _threads
    if n is not None and n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = n


def get_threads() -> int:
    return _threads if _threads is not None else default_threads()


def _slices(n: int, chunk: int) -> list[slice]:
    return [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def map_rows(fn: Callable[[slice], np.ndarray], n: int, threads: int | None = None,
             chunk: int = CHUNK_ROWS) -> np.ndarray:
    """Apply ``fn`` to consecutive row slices and stack the results."""
    slices = _slices(n, chunk)
    if not slices:
        return fn(slice(0, 0))
    threads = get_threads() if threads is None else threads
    if threads == 1 or len(slices) == 1:
        parts = [fn(s) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, slices))
    return np.concatenate(parts, axis=0)


def sum_rows(fn: Callable[[slice], np.ndarray], n: int, threads: int | None = None,
             chunk: int = CHUNK_ROWS) -> np.ndarray:
    """Sum ``fn`` over consecutive row slices, combining in fixed chunk order."""
    slices = _slices(n, chunk)
    threads = get_threads() if threads is None else threads
    if threads == 1 or len(slices) <= 1:
        parts = [fn(s) for s in slices]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, slices))
    total = parts[0].copy()
    for p in parts[1:]:
        total += p
    return total
