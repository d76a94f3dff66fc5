"""Cost-sensitive multi-target losses with analytic gradients.

Every loss returns ``(value, grad)`` where ``grad`` is the derivative with
respect to the predictions.  All arithmetic is float64.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

from voxfrac.mesh import MATERIALS


class LossError(ValueError):
    pass


class Metric(str, enum.Enum):
    MSE = "mse"
    L1 = "l1"


class Weighting(str, enum.Enum):
    NONE = "none"
    DBR = "dbr"
    KDE = "kde"
    PHI = "phi"


@dataclass
class LossConfig:
    regression_metric: Metric = Metric.MSE
    weighting: Weighting = Weighting.NONE
    focalr_enabled: bool = False
    focalr_beta: float = 1.0
    focalr_gamma: float = 1.0
    focalr_as_written: bool = False
    wmse_extra_inv_n: bool = True
    reg_coefficient: float = 0.0

    def __post_init__(self):
        self.regression_metric = Metric(self.regression_metric)
        self.weighting = Weighting(self.weighting)

    def validate(self) -> None:
        if not self.focalr_beta > 0:
            raise LossError("focalr_beta must be > 0")
        if self.focalr_gamma < 0:
            raise LossError("focalr_gamma must be >= 0")
        if self.reg_coefficient < 0:
            raise LossError("reg_coefficient must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["regression_metric"] = self.regression_metric.value
        d["weighting"] = self.weighting.value
        return d


def _pair(o, o_hat) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(o, dtype=np.float64).ravel()
    o_hat = np.asarray(o_hat, dtype=np.float64).ravel()
    if o.shape != o_hat.shape:
        raise LossError(f"length mismatch: {o.size} targets vs {o_hat.size} predictions")
    if o.size == 0:
        raise LossError("empty batch")
    return o, o_hat


def wmse(o, o_hat, w, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Weighted regression error  (1/N) * sum(w * err) / sum(w).

    ``err`` is the squared residual, or the absolute residual with the L1
    metric.  The leading 1/N is dropped when ``cfg.wmse_extra_inv_n`` is off.
    """
    o, o_hat = _pair(o, o_hat)
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.shape != o.shape:
        raise LossError(f"length mismatch: {w.size} weights for {o.size} samples")
    if np.any(w < 0):
        raise LossError("sample weights must be non-negative")
    wsum = w.sum()
    if not wsum > 0:
        raise LossError("sample weights sum to zero")
    scale = 1.0 / wsum
    if cfg.wmse_extra_inv_n:
        scale /= o.size
    r = o - o_hat
    if cfg.regression_metric is Metric.L1:
        value = scale * np.dot(w, np.abs(r))
        grad = -scale * w * np.sign(r)
    else:
        value = scale * np.dot(w, r * r)
        grad = -2.0 * scale * w * r
    return float(value), grad


def focalr(o, o_hat, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Focal regression term on squared errors e_i = (o_i - o_hat_i)^2.

    Default: mean(sigmoid(|beta e|)^gamma * e).  With ``focalr_as_written``:
    mean(sigmoid(|beta e|) * gamma * e).  Gradients flow through both the
    modulating factor and e.
    """
    o, o_hat = _pair(o, o_hat)
    beta, gamma = cfg.focalr_beta, cfg.focalr_gamma
    r = o - o_hat
    e = r * r
    s = sigmoid(np.abs(beta * e))
    ds_de = s * (1.0 - s) * beta  # beta > 0 and e >= 0
    if cfg.focalr_as_written:
        terms = gamma * s * e
        dterm_de = gamma * (ds_de * e + s)
    else:
        sg = s**gamma
        terms = sg * e
        # d(s^g)/de = g s^(g-1) ds/de, written to stay finite at g = 0
        dterm_de = sg + gamma * sg * (1.0 - s) * beta * e
    n = o.size
    grad = dterm_de * (-2.0 * r) / n
    return float(terms.sum() / n), grad


def kernel_repulsion(points: np.ndarray, sigma: float) -> float:
    """Sum over kernel-point pairs of max(0, 1 - dist / sigma)^2."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 2:
        return 0.0
    diff = p[:, None, :] - p[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    iu = np.triu_indices(len(p), 1)
    return float(np.sum(np.maximum(0.0, 1.0 - dist[iu] / sigma) ** 2))


@dataclass
class TargetTerms:
    wmse: float = 0.0
    focalr: float = 0.0
    reg: float = 0.0

    @property
    def value(self) -> float:
        return self.wmse + self.reg + self.focalr


def target_loss(o, o_hat, w, reg_value: float = 0.0,
                cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray, TargetTerms]:
    """L_wmse + L_reg + L_focalr for one target channel."""
    if w is None:
        w = np.ones(np.size(o))
    value, grad = wmse(o, o_hat, w, cfg)
    terms = TargetTerms(wmse=value, reg=float(reg_value))
    if cfg.focalr_enabled:
        fv, fg = focalr(o, o_hat, cfg)
        terms.focalr = fv
        grad = grad + fg
    return terms.value, grad, terms


@dataclass
class LossBreakdown:
    targets: dict[str, TargetTerms] = field(default_factory=dict)
    total: float = 0.0

    def as_record(self, step: int | None = None, lr: float | None = None) -> dict:
        rec = {}
        if step is not None:
            rec["step"] = step
        if lr is not None:
            rec["lr"] = lr
        for name, t in self.targets.items():
            rec[name] = {"wmse": t.wmse, "focalr": t.focalr, "reg": t.reg}
        rec["total"] = self.total
        return rec

    def to_json(self, step: int | None = None, lr: float | None = None) -> str:
        return json.dumps(self.as_record(step, lr))


def total_loss(targets, predictions, weights=None, reg_value: float = 0.0,
               cfg: LossConfig = LossConfig()) -> tuple[LossBreakdown, np.ndarray]:
    """Sum of per-target losses over bark, leaf, soil and misc.

    ``targets`` and ``predictions`` are (N, 4); ``weights`` is (N, 4) or None
    for uniform weights.  Returns the breakdown and the (N, 4) gradient.
    """
    o = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    n_targets = len(MATERIALS)
    if o.ndim != 2 or o.shape[1] != n_targets or p.shape != o.shape:
        raise LossError(f"expected ({o.shape[0] if o.ndim else '?'}, {n_targets}) targets and predictions, "
                        f"got {o.shape} and {p.shape}")
    if weights is None:
        weights = np.ones_like(o)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != o.shape:
        raise LossError(f"weights shape {weights.shape} does not match targets {o.shape}")
    grad = np.zeros_like(p)
    out = LossBreakdown()
    values = []
    for m in MATERIALS:
        v, g, terms = target_loss(o[:, m], p[:, m], weights[:, m], reg_value, cfg)
        out.targets[m.label] = terms
        values.append(v)
        grad[:, m] = g
    out.total = float(sum(values))
    return out, grad
