import json

import numpy as np
import pytest

from voxfrac.kpnet.network import KpNetwork, NetworkConfig
from voxfrac.metrics import (MetricsError, bin_csv, evaluate_model, evaluate_predictions, mean_baseline,
                             per_bin_error, region_csv, stratified_mae, summary_json, write_reports)
from voxfrac.relevance import HistogramSpec


def worked_example():
    """1000 samples: 960 in a dense bin, 35 in a moderate bin, 5 in a sparse bin."""
    o = np.concatenate([np.full(960, 0.905), np.full(35, 0.505), np.full(5, 0.1)])
    pred = o.copy()
    pred[-5:] = 0.0
    return o, pred


def test_worked_example_exact():
    o, p = worked_example()
    rep = stratified_mae(o, p)
    assert rep.counts == {"sparse": 5, "moderate": 35, "dense": 960}
    assert rep.mae_sparse == 0.1
    assert rep.mae_moderate == 0.0 and rep.mae_dense == 0.0
    assert rep.mae_overall == 0.0005


def test_perfect_predictions(rng):
    o = rng.random(300)
    rep = stratified_mae(o, o)
    assert rep.mae_overall == 0.0
    assert all(v in (0.0, None) for v in rep.mae.values())


def test_absent_region_is_none_not_zero():
    rep = stratified_mae(np.full(50, 0.3), np.full(50, 0.2))
    assert rep.mae_sparse is None and rep.mae_moderate is None
    assert rep.mae_dense == pytest.approx(0.1)
    assert "NA" in region_csv({"bark": rep})


def test_uniform_constant_prediction(rng):
    o = rng.random(200_000)
    # the standard deviation of |U - 0.5| is sqrt(1/48), so 5 sigma is about 0.0016
    assert stratified_mae(o, np.full_like(o, 0.5)).mae_overall == pytest.approx(0.25, abs=0.0016)


def test_recombination_random_sets(rng):
    for _ in range(1000):
        n = int(rng.integers(1, 400))
        o = rng.beta(rng.uniform(0.2, 3), rng.uniform(0.2, 3), n)
        p = np.clip(o + rng.normal(scale=0.1, size=n), 0, 1)
        rep = stratified_mae(o, p)
        assert sum(rep.counts.values()) == n
        recombined = sum(rep.counts[k] * v for k, v in rep.mae.items() if v is not None) / n
        assert abs(recombined - rep.mae_overall) <= 1e-12
        assert abs(rep.bins.density.sum() - 1) <= 1e-12


def test_regions_ignore_predictions(rng):
    o = rng.random(500)
    a = stratified_mae(o, rng.random(500))
    b = stratified_mae(o, rng.random(500))
    assert a.counts == b.counts


def test_per_bin_examples():
    spec = HistogramSpec(10)
    t = per_bin_error([0.51, 0.52], [0.5, 0.5], spec)
    assert t.populated().tolist() == [5]
    assert np.isnan(t.mean_abs_error[0]) and t.density[0] == 0
    t = per_bin_error([0.15, 0.15, 0.75], [0.25, 0.05, 0.45], spec)
    assert t.mean_abs_error[1] == pytest.approx(0.1)
    assert t.mean_abs_error[7] == pytest.approx(0.3)
    assert t.density[1] == pytest.approx(2 / 3)


def test_per_bin_mirror_symmetry(rng):
    spec = HistogramSpec(10)
    half = rng.random(100) * 0.5
    e = rng.random(100) * 0.01
    o = np.concatenate([half, 1 - half])
    p = np.concatenate([half + e, 1 - half - e])
    t = per_bin_error(o, p, spec)
    assert t.mean_abs_error == pytest.approx(t.mean_abs_error[::-1], abs=1e-12, nan_ok=True)
    assert t.density.tolist() == t.density[::-1].tolist()


def test_errors():
    with pytest.raises(MetricsError):
        stratified_mae([0.1, 0.2], [0.1])
    with pytest.raises(MetricsError):
        stratified_mae([], [])
    with pytest.raises(MetricsError):
        evaluate_predictions(np.zeros((3, 3)), np.zeros((3, 3)))


def test_mean_baseline_is_mean_absolute_deviation(rng):
    t = rng.dirichlet(np.ones(4), 500)
    reps = evaluate_predictions(t, mean_baseline(t))
    for j, name in enumerate(["bark", "leaf", "soil", "misc"]):
        col = t[:, j]
        mad = sum(abs(v - col.mean()) for v in col) / len(col)
        assert reps[name].mae_overall == pytest.approx(mad, rel=1e-12)


class _Toy:
    """Minimal stand-in for a dataset split."""

    def __init__(self, rng, n=40):
        self.position = np.floor(rng.uniform(0, 5, size=(n, 3))) + 0.5 + rng.normal(scale=0.01, size=(n, 3))
        self.targets = rng.dirichlet(np.ones(4), n)
        self._f = np.column_stack([np.ones(n), rng.random(n)])
        self.index = np.arange(3 * n).reshape(n, 3)

    def features(self):
        return self._f

    def __len__(self):
        return len(self.targets)


def test_evaluate_model_deterministic(tmp_path, rng):
    net = KpNetwork.create(NetworkConfig(stages=2, base_channels=4, kernel_points=5, input_sphere_radius=6.0))
    ds = _Toy(rng)
    a, pa = evaluate_model(net, ds)
    b, pb = evaluate_model(net, ds)
    assert np.array_equal(pa, pb)
    assert region_csv(a) == region_csv(b) and bin_csv(a) == bin_csv(b)
    paths = write_reports(a, tmp_path, prefix="x_")
    lines = open(paths["regions"]).read().splitlines()
    assert lines[0] == "target,region,count,mae" and len(lines) == 1 + 4 * 4
    assert open(paths["bins"]).readline().strip() == "target,bin_center,density,mean_abs_error"
    assert set(json.loads(summary_json(a))) == {"bark", "leaf", "soil", "misc"}
    empty = _Toy(rng, 0)
    with pytest.raises(MetricsError):
        evaluate_model(net, empty)
