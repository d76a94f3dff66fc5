"""Momentum SGD over random input spheres, and sphere-tiled prediction."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from voxfrac.kpnet.network import KpNetwork, build_geometry
from voxfrac.objective import LossBreakdown, LossConfig, kernel_repulsion, total_loss


class TrainingDiverged(RuntimeError):
    """Raised when the loss becomes non-finite or explodes.

    ``last_good`` holds the network as it was before the offending step.
    """

    def __init__(self, message: str, last_good: KpNetwork, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 200
    steps_per_epoch: int = 50
    spheres_per_batch: int = 4
    learning_rate: float = 1e-2
    momentum: float = 0.98
    lr_decay: float = 0.1
    lr_decay_every: int = 100
    grad_clip: float = 100.0
    divergence_threshold: float = 1e3
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.spheres_per_batch < 1:
            raise ValueError("epochs, steps_per_epoch and spheres_per_batch must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // self.lr_decay_every)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    network: KpNetwork
    history: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["total"] if self.history else math.nan


def _sphere_spacing(points: np.ndarray, net: KpNetwork) -> float:
    cfg = net.config
    coarse = cfg.dl(cfg.stages - 1) * 2.0
    span = float(np.ptp(points[:, 0])) if len(points) else 0.0
    need = span + 2 * cfg.input_sphere_radius + 2 * cfg.radius(cfg.stages - 1) + coarse
    # a multiple of the coarsest cell keeps every subsampling grid aligned
    return math.ceil(need / coarse) * coarse


def sample_batch(tree: cKDTree, points: np.ndarray, n_spheres: int, radius: float,
                 spacing: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Indices of points in ``n_spheres`` random spheres plus their shifted coordinates."""
    idx_parts, pts_parts = [], []
    for j in range(n_spheres):
        center = points[rng.integers(len(points))]
        idx = np.sort(np.asarray(tree.query_ball_point(center, radius), dtype=np.int64))
        idx_parts.append(idx)
        pts_parts.append(points[idx] + np.array([j * spacing, 0.0, 0.0]))
    return np.concatenate(idx_parts), np.concatenate(pts_parts)


def _batch_weights(w: np.ndarray) -> np.ndarray:
    # a channel whose batch weights all vanish falls back to uniform weights
    w = w.copy()
    dead = ~(w.sum(axis=0) > 0)
    w[:, dead] = 1.0
    return w


def constant_regularizer(net: KpNetwork, coefficient: float) -> float:
    """Kernel repulsion summed over layers; constant because kernels are rigid."""
    if coefficient == 0:
        return 0.0
    cfg = net.config
    total = 0.0
    for s in range(cfg.stages):
        kp, sigma = net.kernel.scaled(cfg.radius(s))
        total += kernel_repulsion(kp, sigma)
    return coefficient * total


def sgd_step(net: KpNetwork, points, features, targets, weights, loss_cfg: LossConfig, lr: float,
             cfg: TrainConfig, velocity: dict, reg_value: float = 0.0) -> LossBreakdown | None:
    """One forward/backward pass and momentum update.

    Returns None, leaving the parameters untouched, when the loss is not
    finite or exceeds ``cfg.divergence_threshold``.
    """
    probs, cache = net.forward(points, features, training=True)
    breakdown, grad = total_loss(targets, probs, weights, reg_value, loss_cfg)
    if not np.isfinite(breakdown.total) or breakdown.total > cfg.divergence_threshold:
        return None
    grads = net.backward(grad, cache)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
    for k, g in grads.items():
        v = velocity[k]
        v *= cfg.momentum
        v += scale * g
        net.params[k] -= lr * v
    return breakdown


def train(net: KpNetwork, points, features, targets, weights=None,
          loss_cfg: LossConfig = LossConfig(), cfg: TrainConfig = TrainConfig(),
          log=None, checkpoint_path=None, on_epoch_end=None) -> TrainResult:
    """Fit ``net`` in place.

    ``log`` may be a writable text stream; one JSON object per step is
    written to it.  ``on_epoch_end(epoch, net)`` may return True to stop
    early.  On divergence the last good network is saved to
    ``checkpoint_path`` (if given) and ``TrainingDiverged`` is raised.
    """
    cfg.validate()
    loss_cfg.validate()
    pts = np.asarray(points, dtype=np.float64)
    feats = np.asarray(features, dtype=np.float64)
    tgt = np.asarray(targets, dtype=np.float64)
    w_all = np.ones_like(tgt) if weights is None else np.asarray(weights, dtype=np.float64)
    if not (len(pts) == len(feats) == len(tgt) == len(w_all)):
        raise ValueError("points, features, targets and weights must have equal length")
    if len(pts) == 0:
        raise ValueError("no training points")
    rng = np.random.default_rng(cfg.seed)
    tree = cKDTree(pts)
    spacing = _sphere_spacing(pts, net)
    reg_value = constant_regularizer(net, loss_cfg.reg_coefficient)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    result = TrainResult(net)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        for _ in range(cfg.steps_per_epoch):
            idx, bpts = sample_batch(tree, pts, cfg.spheres_per_batch, net.config.input_sphere_radius, spacing, rng)
            snapshot = copy.deepcopy(net)
            breakdown = sgd_step(net, bpts, feats[idx], tgt[idx], _batch_weights(w_all[idx]), loss_cfg,
                                 lr, cfg, velocity, reg_value)
            if breakdown is None or not np.isfinite(breakdown.total) or breakdown.total > cfg.divergence_threshold:
                total = math.nan if breakdown is None else breakdown.total
                if checkpoint_path is not None:
                    snapshot.save(checkpoint_path)
                raise TrainingDiverged(f"loss {total} at step {step}", snapshot, step)
            record = breakdown.as_record(step, lr)
            record["epoch"] = epoch
            record["points"] = int(len(idx))
            result.history.append(record)
            if log is not None:
                log.write(json.dumps(record) + "\n")
            step += 1
        if on_epoch_end is not None and on_epoch_end(epoch, net):
            break
    return result


def predict_cloud(net: KpNetwork, points, features, inner_ratio: float = 0.5) -> np.ndarray:
    """Fractions for every point, averaged over the spheres that cover it.

    Spheres are centered on the lowest-index point not yet covered; each
    sphere contributes its predictions to points within ``inner_ratio * R``
    of its center, so every point is covered by at least its own sphere.
    """
    pts = np.asarray(points, dtype=np.float64)
    feats = np.asarray(features, dtype=np.float64)
    n = len(pts)
    out = np.zeros((n, net.config.out_features))
    hits = np.zeros(n)
    if n == 0:
        return out
    tree = cKDTree(pts)
    R = net.config.input_sphere_radius
    covered = np.zeros(n, dtype=bool)
    cursor = 0
    while True:
        while cursor < n and covered[cursor]:
            cursor += 1
        if cursor == n:
            break
        center = pts[cursor]
        idx = np.sort(np.asarray(tree.query_ball_point(center, R), dtype=np.int64))
        probs = net.predict(pts[idx], feats[idx])
        inner = np.linalg.norm(pts[idx] - center, axis=1) <= inner_ratio * R
        inner |= idx == cursor
        out[idx[inner]] += probs[inner]
        hits[idx[inner]] += 1
        covered[idx[inner]] = True
    return out / hits[:, None]


def evaluate_loss(net: KpNetwork, points, features, targets, weights=None,
                  loss_cfg: LossConfig = LossConfig()) -> LossBreakdown:
    probs = predict_cloud(net, points, features)
    w = None if weights is None else _batch_weights(np.asarray(weights, dtype=np.float64))
    return total_loss(targets, probs, w, 0.0, loss_cfg)[0]


__all__ = ["TrainConfig", "TrainResult", "TrainingDiverged", "train", "predict_cloud",
           "evaluate_loss", "sample_batch", "sgd_step", "build_geometry", "constant_regularizer"]
