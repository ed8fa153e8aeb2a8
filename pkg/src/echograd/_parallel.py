"""Deterministic fan-out of per-ping work across processes.

Workers are forked so the closure and scene arrays are inherited without
pickling; only results travel back.  ``map_ordered`` returns results in
index order, so any reduction the caller performs is identical to the
single-process loop, bit for bit.
"""

from __future__ import annotations

import multiprocessing as mp

_WORK = None


def _call(i: int):
    return _WORK(i)


def map_ordered(fn, n: int, threads: int) -> list:
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    global _WORK
    _WORK = fn
    try:
        ctx = mp.get_context("fork")
        with ctx.Pool(processes=min(threads, n)) as pool:
            chunk = max(1, n // (4 * threads))
            return pool.map(_call, range(n), chunksize=chunk)
    finally:
        _WORK = None
