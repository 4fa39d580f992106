"""Worker-pool execution context.

Kernels split work by batch item and call :func:`map_items`.  Each item is
computed identically regardless of the thread count, and callers reduce
per-item results in item order, so 1-thread and N-thread runs agree.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from typing import Callable, Iterator, TypeVar

T = TypeVar("T")

_threads = max(1, int(os.environ.get("STCONV_THREADS", "1") or 1))
_pool: ThreadPoolExecutor | None = None
_pool_size = 0


def get_threads() -> int:
    return _threads


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


@contextmanager
def threads(n: int) -> Iterator[None]:
    previous = get_threads()
    set_threads(n)
    try:
        yield
    finally:
        set_threads(previous)


def _executor(n: int) -> ThreadPoolExecutor:
    global _pool, _pool_size
    if _pool is None or _pool_size != n:
        if _pool is not None:
            _pool.shutdown(wait=True)
        _pool = ThreadPoolExecutor(max_workers=n, thread_name_prefix="stconv")
        _pool_size = n
    return _pool


def shutdown() -> None:
    global _pool, _pool_size
    if _pool is not None:
        _pool.shutdown(wait=True)
    _pool, _pool_size = None, 0


def map_items(fn: Callable[[int], T], count: int) -> list[T]:
    n = min(_threads, count)
    if n <= 1:
        return [fn(i) for i in range(count)]
    return list(_executor(n).map(fn, range(count)))
