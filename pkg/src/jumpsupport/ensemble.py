"""Block-partitioned execution of per-path work.

Paths are grouped into fixed-size blocks of consecutive stream ids. Blocks are
independent, so the worker count only changes wall-clock time; results are
merged in block order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

import numpy as np

T = TypeVar("T")

DEFAULT_BLOCK_SIZE = 2048


def blocks(n_items: int, block_size: int = DEFAULT_BLOCK_SIZE, start: int = 0) -> list[np.ndarray]:
    ids = np.arange(start, start + n_items, dtype=np.int64)
    return [ids[i:i + block_size] for i in range(0, n_items, block_size)]


def run_blocks(n_items: int, fn: Callable[[np.ndarray], T], *, block_size: int = DEFAULT_BLOCK_SIZE,
               workers: int = 1, start: int = 0) -> list[T]:
    parts = blocks(n_items, block_size, start)
    if workers <= 1 or len(parts) <= 1:
        return [fn(ids) for ids in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))
