"""Density-stratified error reports.

Samples are grouped by the density of the ground-truth histogram bin they
fall in: sparse (< 1% of samples), moderate (1% to 5%) and dense (> 5%).
Region errors pool the samples of all bins in the region, so that
``sum(count_r * mae_r) / N`` is the overall MAE.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from voxfrac.mesh import MATERIALS
from voxfrac.relevance import HistogramSpec, Region, bin_regions, histogram

NA = "NA"


class MetricsError(ValueError):
    pass


@dataclass
class BinTable:
    centers: np.ndarray
    density: np.ndarray
    mean_abs_error: np.ndarray  # nan where the bin is empty
    count: np.ndarray

    def populated(self) -> np.ndarray:
        return np.flatnonzero(self.count > 0)


@dataclass
class EvalReport:
    target: str
    n: int
    mae_overall: float
    mae: dict[str, float | None]
    counts: dict[str, int]
    bins: BinTable
    abs_error: np.ndarray = field(repr=False)

    @property
    def mae_sparse(self):
        return self.mae[Region.SPARSE.label]

    @property
    def mae_moderate(self):
        return self.mae[Region.MODERATE.label]

    @property
    def mae_dense(self):
        return self.mae[Region.DENSE.label]

    def summary(self) -> dict:
        return {"n": self.n, "mae_overall": self.mae_overall,
                "mae_sparse": self.mae_sparse, "mae_moderate": self.mae_moderate, "mae_dense": self.mae_dense,
                "counts": dict(self.counts)}


def _check(o, o_hat) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(o, dtype=np.float64).ravel()
    o_hat = np.asarray(o_hat, dtype=np.float64).ravel()
    if o.shape != o_hat.shape:
        raise MetricsError(f"{o.size} targets vs {o_hat.size} predictions")
    if o.size == 0:
        raise MetricsError("nothing to evaluate")
    return o, o_hat


def per_bin_error(o, o_hat, spec: HistogramSpec = HistogramSpec()) -> BinTable:
    o, o_hat = _check(o, o_hat)
    bins = spec.bin_of(o)
    err = np.abs(o - o_hat)
    count = np.bincount(bins, minlength=spec.bin_count)
    sums = np.bincount(bins, weights=err, minlength=spec.bin_count)
    mean = np.full(spec.bin_count, np.nan)
    nz = count > 0
    mean[nz] = sums[nz] / count[nz]
    return BinTable(spec.centers, count / o.size, mean, count)


def stratified_mae(o, o_hat, spec: HistogramSpec = HistogramSpec(), target: str = "") -> EvalReport:
    """MAE overall and per ground-truth density region for one target."""
    o, o_hat = _check(o, o_hat)
    err = np.abs(o - o_hat)
    regions = bin_regions(histogram(o, spec))[spec.bin_of(o)]
    mae, counts = {}, {}
    for r in Region:
        sel = regions == r
        counts[r.label] = int(sel.sum())
        mae[r.label] = float(err[sel].mean()) if sel.any() else None
    return EvalReport(target, int(o.size), float(err.mean()), mae, counts, per_bin_error(o, o_hat, spec), err)


def evaluate_predictions(targets, predictions, spec: HistogramSpec = HistogramSpec()) -> dict[str, EvalReport]:
    t = np.asarray(targets, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != len(MATERIALS) or p.shape != t.shape:
        raise MetricsError(f"expected (N, {len(MATERIALS)}) targets and predictions, got {t.shape} and {p.shape}")
    return {m.label: stratified_mae(t[:, m], p[:, m], spec, m.label) for m in MATERIALS}


def mean_baseline(targets) -> np.ndarray:
    """Predict each target's mean for every sample."""
    t = np.asarray(targets, dtype=np.float64)
    return np.broadcast_to(t.mean(axis=0), t.shape).copy()


def evaluate_model(net, dataset, spec: HistogramSpec = HistogramSpec()) -> tuple[dict[str, EvalReport], np.ndarray]:
    """Predict every voxel of ``dataset`` with ``net`` and build the reports."""
    from voxfrac.kpnet.train import predict_cloud

    if len(dataset) == 0:
        raise MetricsError("cannot evaluate an empty split")
    preds = predict_cloud(net, dataset.position, dataset.features())
    return evaluate_predictions(dataset.targets, preds, spec), preds


# -- serialization ------------------------------------------------------------------------

def _fmt(v) -> str:
    return NA if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


def region_csv(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "region", "count", "mae"])
    for name, rep in reports.items():
        for r in Region:
            w.writerow([name, r.label, rep.counts[r.label], _fmt(rep.mae[r.label])])
        w.writerow([name, "overall", rep.n, _fmt(rep.mae_overall)])
    return buf.getvalue()


def bin_csv(reports: dict[str, EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "bin_center", "density", "mean_abs_error"])
    for name, rep in reports.items():
        b = rep.bins
        for c, d, e in zip(b.centers, b.density, b.mean_abs_error):
            w.writerow([name, repr(float(c)), repr(float(d)), _fmt(e)])
    return buf.getvalue()


def summary_json(reports: dict[str, EvalReport]) -> str:
    return json.dumps({name: rep.summary() for name, rep in reports.items()}, indent=2, sort_keys=True)


def write_reports(reports: dict[str, EvalReport], out_dir, prefix: str = "") -> dict[str, str]:
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "regions": out / f"{prefix}regions.csv",
        "bins": out / f"{prefix}bins.csv",
        "summary": out / f"{prefix}summary.json",
    }
    paths["regions"].write_text(region_csv(reports))
    paths["bins"].write_text(bin_csv(reports))
    paths["summary"].write_text(summary_json(reports))
    return {k: str(v) for k, v in paths.items()}


def write_error_dump(dataset, predictions, path) -> None:
    """Per-voxel absolute errors, for rendering spatial error maps."""
    err = np.abs(np.asarray(predictions) - dataset.targets)
    with open(path, "w") as fh:
        fh.write("ix,iy,iz,x,y,z," + ",".join(f"abs_err_{m.label}" for m in MATERIALS) + "\n")
        for ijk, p, e in zip(dataset.index.tolist(), dataset.position.tolist(), err.tolist()):
            fh.write(",".join(str(v) for v in ijk) + "," + ",".join(repr(v) for v in p) + ","
                     + ",".join(repr(v) for v in e) + "\n")
