"""Intra-op thread pinning that keeps results independent of ambient parallelism.

Multi-threaded reductions in torch (full sums, weight-gradient GEMMs) change their
summation order with the thread count, so bitwise reproducibility needs a fixed count.
All model numerics run under ``pinned_threads``; the count is part of the run config.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import torch

DEFAULT_THREADS = 1
_threads = DEFAULT_THREADS
_lock = threading.Lock()
_active = 0  # open pinned blocks across all threads
_active_n = None
_local = threading.local()


def set_compute_threads(n: int) -> None:
    global _threads
    if int(n) < 1:
        raise ValueError(f"compute threads must be >= 1, got {n}")
    _threads = int(n)


def compute_threads() -> int:
    return _threads


@contextmanager
def pinned_threads(n: int | None = None):
    """Run the block with exactly ``n`` (default: the configured count) intra-op threads.

    torch keeps a count per OS thread, so every thread pins its own on entry. Concurrent
    blocks must agree on ``n``. The thread that closes the last open block restores its
    own prior count; nothing changes the count while any block is open, and worker
    threads that leave earlier keep ``n``.
    """
    global _active, _active_n
    n = _threads if n is None else int(n)
    depth = getattr(_local, "depth", 0)
    with _lock:
        if _active and n != _active_n:
            raise RuntimeError(f"concurrent pinned_threads blocks disagree: {n} vs {_active_n}")
        _active_n = n
        if depth == 0:
            _local.saved = torch.get_num_threads()
        if torch.get_num_threads() != n:
            torch.set_num_threads(n)
        _active += 1
        _local.depth = depth + 1
    try:
        yield
    finally:
        with _lock:
            _active -= 1
            _local.depth -= 1
            if _active == 0 and _local.depth == 0 and torch.get_num_threads() != _local.saved:
                torch.set_num_threads(_local.saved)
