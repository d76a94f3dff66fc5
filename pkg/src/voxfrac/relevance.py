"""Histogram-based relevance weights for imbalanced targets in [0, 1].

Three weightings are provided: density-based relevance (DBR), the inverted
and max-normalized Gaussian KDE, and the boxplot-driven phi relevance
function used by SMOTER.  All of them produce one weight per histogram bin;
samples take the weight of the bin they fall in.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.stats import gaussian_kde


class RelevanceError(ValueError):
    pass


class Method(str, enum.Enum):
    DBR = "dbr"
    KDE = "kde"
    PHI = "phi"


class Region(enum.IntEnum):
    SPARSE = 0
    MODERATE = 1
    DENSE = 2

    @property
    def label(self) -> str:
        return self.name.lower()


SPARSE_BELOW = 0.01
DENSE_ABOVE = 0.05


@dataclass(frozen=True)
class HistogramSpec:
    bin_count: int = 100

    def __post_init__(self):
        if self.bin_count < 2:
            raise RelevanceError("bin_count must be >= 2")

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.bin_count) + 0.5) / self.bin_count

    def bin_of(self, values) -> np.ndarray:
        """Bin index floor(x * b), with x == 1 folded into the last bin."""
        x = np.asarray(values, dtype=np.float64)
        if x.size and (np.any(~np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0):
            raise RelevanceError("values must lie in [0, 1]")
        return np.minimum(np.floor(x * self.bin_count).astype(np.int64), self.bin_count - 1)


@dataclass(frozen=True)
class RelevanceTable:
    method: Method
    bin_weights: np.ndarray
    mask: np.ndarray  # True where the bin had no samples
    densities: np.ndarray

    @property
    def bin_count(self) -> int:
        return len(self.bin_weights)


def histogram(values, spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise RelevanceError("cannot build a histogram of no values")
    return np.bincount(spec.bin_of(x), minlength=spec.bin_count)


def merge_sparse_bins(d, threshold: float) -> np.ndarray:
    """Group label per bin after folding thin non-empty bins into a neighbor.

    A non-empty bin holding less than ``threshold`` of the samples joins the
    closest bin (by index, lower index on ties) that is itself above the
    threshold.  Labels are the index of the receiving bin.
    """
    d = np.asarray(d, dtype=np.float64)
    p = d / d.sum()
    labels = np.arange(len(d))
    anchors = np.flatnonzero(p >= threshold)
    if len(anchors) == 0:
        return labels
    for j in np.flatnonzero((d > 0) & (p < threshold)):
        labels[j] = anchors[np.argmin(np.abs(anchors - j))]
    return labels


def dbr_weights(d, b: int | None = None, merge_threshold: float | None = None) -> RelevanceTable:
    """Density-based relevance.

    With f_j = 100 d_j / sum(d), w_j = (100 / b) / f_j and
    gamma_j = sqrt(w_j / max(w)), over non-empty bins only.
    """
    d = np.asarray(d, dtype=np.float64)
    b = len(d) if b is None else b
    if b != len(d):
        raise RelevanceError(f"{len(d)} densities for {b} bins")
    if not np.any(d > 0):
        raise RelevanceError("DBR needs at least one non-empty bin")
    mask = d <= 0
    counts = d
    if merge_threshold:
        labels = merge_sparse_bins(d, merge_threshold)
        counts = np.bincount(labels, weights=d, minlength=b)[labels]
    f = counts / d.sum() * 100.0
    w = np.zeros(b)
    w[~mask] = (100.0 / b) / f[~mask]
    gamma = np.zeros(b)
    gamma[~mask] = np.sqrt(w[~mask] / w[~mask].max())
    return RelevanceTable(Method.DBR, gamma, mask, d)


def scott_bandwidth(values) -> float:
    x = np.asarray(values, dtype=np.float64)
    return float(np.std(x, ddof=1) * x.size ** (-1.0 / 5.0))


def kde_weights(values, spec: HistogramSpec = HistogramSpec()) -> RelevanceTable:
    """1 - pdf / max(pdf) of a Scott-bandwidth Gaussian KDE, at bin centers."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 2:
        raise RelevanceError("KDE needs at least two samples")
    if x.min() == x.max():
        raise RelevanceError("KDE undefined for zero-variance targets")
    pdf = gaussian_kde(x, bw_method="scott")(spec.centers)
    weights = np.clip(1.0 - pdf / pdf.max(), 0.0, 1.0)
    d = histogram(x, spec)
    return RelevanceTable(Method.KDE, weights, d == 0, d.astype(np.float64))


def phi_control_points(values, coef: float = 1.5) -> tuple[np.ndarray, np.ndarray]:
    """(x, relevance) control points from boxplot extremes.

    The median maps to 0.  If values lie beyond a whisker fence, the most
    extreme observation still inside the fence maps to 1; otherwise the
    sample minimum or maximum maps to 0.
    """
    x = np.sort(np.asarray(values, dtype=np.float64).ravel())
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - coef * iqr, q3 + coef * iqr
    inside = x[(x >= lo_fence) & (x <= hi_fence)]
    pts = []
    if x[0] < lo_fence:
        pts.append((inside[0], 1.0))
    else:
        pts.append((x[0], 0.0))
    if med != x[0]:
        pts.append((med, 0.0))
    if x[-1] > hi_fence:
        upper = inside[-1]
        if upper <= pts[-1][0]:
            upper = x[x > hi_fence][0]
        pts.append((upper, 1.0))
    elif med != x[-1]:
        pts.append((x[-1], 0.0))
    # low extreme collapsing onto the median
    if len(pts) > 1 and pts[0][0] >= pts[1][0]:
        pts[0] = (x[x < lo_fence][-1], 1.0)
    cx = np.array([p[0] for p in pts])
    cy = np.array([p[1] for p in pts])
    return cx, cy


def phi_function(values, coef: float = 1.5):
    """Relevance function phi(y) in [0, 1] fitted to ``values``."""
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 5:
        raise RelevanceError("phi relevance needs at least five samples")
    if x.min() == x.max():
        raise RelevanceError("phi relevance undefined for constant targets")
    cx, cy = phi_control_points(x, coef)
    if len(cx) == 1:
        return lambda y: np.full(np.shape(y), cy[0])
    # zero slopes at the control points keep each piece monotone
    spline = CubicHermiteSpline(cx, cy, np.zeros_like(cx), extrapolate=False)

    def phi(y):
        y = np.asarray(y, dtype=np.float64)
        out = spline(np.clip(y, cx[0], cx[-1]))
        return np.clip(out, 0.0, 1.0)

    return phi


def phi_relevance(values, spec: HistogramSpec = HistogramSpec()) -> RelevanceTable:
    x = np.asarray(values, dtype=np.float64).ravel()
    weights = phi_function(x)(spec.centers)
    d = histogram(x, spec)
    return RelevanceTable(Method.PHI, weights, d == 0, d.astype(np.float64))


def relevance_table(method: Method | str, values, spec: HistogramSpec = HistogramSpec(),
                    merge_threshold: float | None = None) -> RelevanceTable:
    method = Method(method)
    if method is Method.DBR:
        return dbr_weights(histogram(values, spec), spec.bin_count, merge_threshold)
    if method is Method.KDE:
        return kde_weights(values, spec)
    return phi_relevance(values, spec)


def sample_weights(table: RelevanceTable, values, spec: HistogramSpec = HistogramSpec()) -> np.ndarray:
    if table.bin_count != spec.bin_count:
        raise RelevanceError(f"table has {table.bin_count} bins, histogram spec has {spec.bin_count}")
    return table.bin_weights[spec.bin_of(values)]


def bin_regions(d) -> np.ndarray:
    """Sparse (< 1%), moderate (1%..5% inclusive) or dense (> 5%) per bin."""
    d = np.asarray(d, dtype=np.float64)
    total = d.sum()
    if not total > 0:
        raise RelevanceError("bin_regions needs a non-empty histogram")
    p = d / total
    regions = np.full(len(d), Region.MODERATE, dtype=np.int64)
    regions[p < SPARSE_BELOW] = Region.SPARSE
    regions[p > DENSE_ABOVE] = Region.DENSE
    return regions


def write_table_csv(table: RelevanceTable, path, spec: HistogramSpec = HistogramSpec()) -> None:
    regions = bin_regions(table.densities)
    p = table.densities / table.densities.sum()
    with open(path, "w") as fh:
        fh.write("bin_index,bin_center,density,weight,region\n")
        for j, (c, dj, w, r) in enumerate(zip(spec.centers, p, table.bin_weights, regions)):
            fh.write(f"{j},{float(c)!r},{float(dj)!r},{float(w)!r},{Region(r).label}\n")
