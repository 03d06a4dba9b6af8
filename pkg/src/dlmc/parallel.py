"""Deterministic worker pool for per-particle evaluations.

Particle-wise work is split into fixed-size row chunks that are identical for
every worker count; workers only change how chunks are scheduled, never what
arithmetic runs on each chunk. Results are merged in particle-index order, so
outputs are bitwise identical for 1 and W workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence

import numpy as np

__all__ = ["chunked_map", "CHUNK_ROWS"]

# Fixed chunk size: part of the determinism contract, do not derive from
# worker count.
CHUNK_ROWS = 256


def chunked_map(
    fn: Callable[[np.ndarray], Sequence[np.ndarray] | np.ndarray],
    rows: np.ndarray,
    workers: int = 1,
) -> tuple[np.ndarray, ...]:
    """Apply ``fn`` to fixed-size row chunks of ``rows`` and restitch.

    ``fn`` takes an (m, d) array and returns an array or tuple of arrays whose
    leading axis is m. ``fn`` must be pure and row-independent (no RNG; draw
    randomness on the coordinator and pass it in as columns if needed).
    """
    n = rows.shape[0]
    if n == 0:
        raise ValueError("empty particle block")
    chunks = [rows[i : i + CHUNK_ROWS] for i in range(0, n, CHUNK_ROWS)]
    if workers <= 1 or len(chunks) == 1:
        results = [fn(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fn, chunks))
    first = results[0]
    if isinstance(first, tuple):
        return tuple(np.concatenate([r[k] for r in results]) for k in range(len(first)))
    return (np.concatenate(results),)
