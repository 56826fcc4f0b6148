"""Deterministic replicate-level parallelism.

Results are always collected in submission order and each work item carries
its own derived RNG seed, so outputs are bitwise independent of the worker
count.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def ordered_map(fn, items, threads: int = 1):
    """Map ``fn`` over ``items`` preserving order; fork workers if threads > 1."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    chunk = max(1, len(items) // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


_SHARED_PAYLOAD = None


def _init_shared(payload):
    global _SHARED_PAYLOAD
    _SHARED_PAYLOAD = payload


def _call_shared(args):
    fn, item = args
    return fn(_SHARED_PAYLOAD, item)


def ordered_map_shared(fn, shared, items, threads: int = 1):
    """Like ordered_map for ``fn(shared, item)``; the shared payload is sent
    to each worker once (pool initializer) instead of per item."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(shared, item) for item in items]
    chunk = max(1, len(items) // (4 * threads))
    with ProcessPoolExecutor(
        max_workers=threads, initializer=_init_shared, initargs=(shared,)
    ) as pool:
        return list(pool.map(_call_shared, [(fn, it) for it in items], chunksize=chunk))
