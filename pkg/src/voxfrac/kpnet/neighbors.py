"""Point-set plumbing: radius neighbors, grid subsampling, nearest upsampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

_OFFSETS = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def _cell_keys(cells: np.ndarray) -> np.ndarray:
    # pack signed cell coordinates into one sortable integer
    c = cells + (1 << 20)
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def radius_neighbors(queries, supports, r: float, max_neighbors: int = 40) -> np.ndarray:
    """Indices of supports within distance ``r`` of each query.

    Rows are sorted by (distance, index), truncated to ``max_neighbors`` and
    padded with the sentinel ``len(supports)``.  Candidates come from the 27
    cells around the query on a hash grid of cell size ``r``.
    """
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    sentinel = len(s)
    out = np.full((len(q), max_neighbors), sentinel, dtype=np.int64)
    if len(q) == 0 or len(s) == 0 or max_neighbors == 0:
        return out
    if not r > 0:
        raise ValueError("radius must be positive")
    s_keys = _cell_keys(np.floor(s / r).astype(np.int64))
    order = np.argsort(s_keys, kind="stable")
    sorted_keys = s_keys[order]
    q_cells = np.floor(q / r).astype(np.int64)

    qi_parts, si_parts = [], []
    for off in _OFFSETS:
        keys = _cell_keys(q_cells + off)
        lo = np.searchsorted(sorted_keys, keys, side="left")
        hi = np.searchsorted(sorted_keys, keys, side="right")
        counts = hi - lo
        if counts.sum() == 0:
            continue
        qi = np.repeat(np.arange(len(q)), counts)
        within = np.arange(qi.size) - np.repeat(np.cumsum(counts) - counts, counts)
        qi_parts.append(qi)
        si_parts.append(order[np.repeat(lo, counts) + within])
    if not qi_parts:
        return out
    qi = np.concatenate(qi_parts)
    si = np.concatenate(si_parts)
    dist = np.linalg.norm(s[si] - q[qi], axis=1)
    keep = dist <= r
    qi, si, dist = qi[keep], si[keep], dist[keep]
    rank_order = np.lexsort((si, dist, qi))
    qi, si = qi[rank_order], si[rank_order]
    starts = np.searchsorted(qi, np.arange(len(q)), side="left")
    rank = np.arange(len(qi)) - starts[qi]
    take = rank < max_neighbors
    out[qi[take], rank[take]] = si[take]
    return out


def brute_force_neighbors(queries, supports, r: float, max_neighbors: int = 40) -> np.ndarray:
    """O(N^2) reference for ``radius_neighbors``."""
    q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    s = np.asarray(supports, dtype=np.float64).reshape(-1, 3)
    out = np.full((len(q), max_neighbors), len(s), dtype=np.int64)
    for i, p in enumerate(q):
        d = np.linalg.norm(s - p, axis=1)
        idx = np.flatnonzero(d <= r)
        idx = idx[np.lexsort((idx, d[idx]))][:max_neighbors]
        out[i, : len(idx)] = idx
    return out


@dataclass
class Pooling:
    """Result of grid subsampling: barycenters plus the member -> cell map."""

    points: np.ndarray
    inverse: np.ndarray
    counts: np.ndarray

    def pool(self, features: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.points),) + features.shape[1:])
        np.add.at(out, self.inverse, features)
        return out / self.counts.reshape((-1,) + (1,) * (features.ndim - 1))

    def unpool_grad(self, grad: np.ndarray) -> np.ndarray:
        return (grad / self.counts.reshape((-1,) + (1,) * (grad.ndim - 1)))[self.inverse]


def grid_pooling(points, dl: float) -> Pooling:
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not dl > 0:
        raise ValueError("dl must be positive")
    cells = np.floor(p / dl).astype(np.int64)
    # lexicographic cell order
    _, first, inverse, counts = np.unique(cells, axis=0, return_index=True, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    bary = np.zeros((len(counts), 3))
    np.add.at(bary, inverse, p)
    bary /= counts[:, None]
    return Pooling(bary, inverse, counts)


def grid_subsample(points, features, dl: float) -> tuple[np.ndarray, np.ndarray]:
    """One barycenter per occupied ``dl`` cell, with member features averaged."""
    pool = grid_pooling(points, dl)
    return pool.points, pool.pool(np.asarray(features, dtype=np.float64))


def nearest_index(coarse_points, fine_points) -> np.ndarray:
    coarse = np.asarray(coarse_points, dtype=np.float64).reshape(-1, 3)
    if len(coarse) == 0:
        raise ValueError("no coarse points to upsample from")
    _, idx = cKDTree(coarse).query(np.asarray(fine_points, dtype=np.float64).reshape(-1, 3), k=1)
    return np.asarray(idx, dtype=np.int64)


def nearest_upsample(coarse_features, coarse_points, fine_points) -> np.ndarray:
    """Copy each fine point the features of its nearest coarse point."""
    return np.asarray(coarse_features)[nearest_index(coarse_points, fine_points)]
