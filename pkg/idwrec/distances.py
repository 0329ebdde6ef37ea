"""
idwrec/distances.py
-------------------
Exact Euclidean distances between representation sets, computed in row
blocks so memory stays bounded for catalogs of a few thousand items.

Both the kernel density estimate and the silhouette score read distances
from here, so the two agree on geometry bit for bit.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

DEFAULT_BLOCK_SIZE = 256


def iter_row_blocks(n_rows: int, block_size: int = DEFAULT_BLOCK_SIZE) -> Iterator[slice]:
    for start in range(0, n_rows, block_size):
        yield slice(start, min(start + block_size, n_rows))


def pairwise_euclidean(a: np.ndarray, b: np.ndarray, block_size: int = DEFAULT_BLOCK_SIZE) -> np.ndarray:
    """
    ||a_i - b_j|| for every pair, in float64.

    Differences are taken explicitly, so a point's distance to itself is
    exactly zero.

    Args:
        a (np.ndarray): (n, d) points.
        b (np.ndarray): (m, d) points.
        block_size (int): Rows of `a` handled per block.

    Returns:
        np.ndarray: (n, m) distance matrix.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"Expected (n, d) and (m, d) arrays, got {a.shape} and {b.shape}")
    out = np.empty((a.shape[0], b.shape[0]), dtype=np.float64)
    for rows in iter_row_blocks(a.shape[0], block_size):
        diff = a[rows, None, :] - b[None, :, :]
        out[rows] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out
