"""Kernel point layouts for rigid point convolutions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_KERNEL_POINTS = 200
DEFAULT_SIGMA = 0.3


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelLayout:
    """K points inside the unit ball (one at the origin) and the influence distance.

    Both are expressed in units of the layer radius; ``scaled`` converts to meters.
    """

    points: np.ndarray
    sigma: float = DEFAULT_SIGMA

    @property
    def K(self) -> int:
        return len(self.points)

    def scaled(self, radius: float) -> tuple[np.ndarray, float]:
        return self.points * radius, self.sigma * radius

    def min_separation(self) -> float:
        if self.K < 2:
            return np.inf
        d = np.linalg.norm(self.points[:, None] - self.points[None], axis=-1)
        return float(d[np.triu_indices(self.K, 1)].min())


def init_kernel_points(K: int, rng_seed: int = 0, sigma: float = DEFAULT_SIGMA,
                       tol: float = 1e-4, max_iter: int = 5000) -> KernelLayout:
    """Spread K points in the unit ball by repulsion, keeping one at the origin.

    Points repel each other with inverse-square forces and are pulled toward
    the center by a unit linear spring; positions are projected back into the
    ball after each step.  Iteration stops when no point moves more than
    ``tol``.
    """
    if K < 1:
        raise KernelError("K must be >= 1")
    if K > MAX_KERNEL_POINTS:
        raise KernelError(f"K={K} exceeds {MAX_KERNEL_POINTS}; points cannot stay separated")
    if not sigma > 0:
        raise KernelError("sigma must be positive")
    if K == 1:
        return KernelLayout(np.zeros((1, 3)), sigma)
    rng = np.random.default_rng(rng_seed)
    free = rng.normal(size=(K - 1, 3))
    free *= (rng.random((K - 1, 1)) ** (1 / 3)) / np.linalg.norm(free, axis=1, keepdims=True)
    pts = np.concatenate([np.zeros((1, 3)), free])
    step = 0.05
    for _ in range(max_iter):
        diff = pts[:, None, :] - pts[None, :, :]
        d2 = np.sum(diff * diff, axis=-1) + np.eye(K)
        repulse = np.sum(diff / d2[..., None] ** 1.5, axis=1) / (K - 1)
        force = repulse - pts
        move = step * force
        move[0] = 0.0
        norm = np.linalg.norm(move, axis=1, keepdims=True)
        move *= np.minimum(1.0, 0.1 / np.maximum(norm, 1e-300))
        new = pts + move
        r = np.linalg.norm(new, axis=1, keepdims=True)
        new = new / np.maximum(r, 1.0)
        shift = float(np.abs(new - pts).max())
        pts = new
        step *= 0.998
        if shift < tol:
            break
    return KernelLayout(pts, sigma)
