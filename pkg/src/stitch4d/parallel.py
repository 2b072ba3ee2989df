"""Deterministic worker parallelism.

Results are always collected in input order and any reduction happens on
the ordered list, so output is bit-identical for every thread count.  The
heavy kernels release the GIL (numba nogil / numpy), which is what makes
threads worthwhile here.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

THREADS_ENV_VAR = "STITCH4D_THREADS"


def resolve_threads(requested: int | None) -> int:
    """CLI value if given, else STITCH4D_THREADS, else the core count.

    Thread count never changes results (ordered reduction), only speed.
    """
    if requested is not None:
        value = int(requested)
    else:
        env = os.environ.get(THREADS_ENV_VAR)
        value = int(env) if env else (os.cpu_count() or 1)
    if value < 1:
        raise ValueError(f"thread count must be >= 1, got {value}")
    return value


def ordered_map(fn, items, threads: int):
    """map(fn, items) as a list, preserving order; threaded when threads > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
