"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed as each check finishes and repeated in the terminal
summary.  Criteria 7 and 8 train networks on the default synthetic scene and
are marked slow.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import binomial_bound_grid, brute_force_neighbors, numeric_grad, random_soup, rel_error
from voxfrac.dataset import SectionGrid, VoxelDataset, block_split
from voxfrac.kpnet import layers as L
from voxfrac.kpnet.kernels import init_kernel_points
from voxfrac.kpnet.network import KpNetwork, NetworkConfig, build_geometry, parameter_count
from voxfrac.kpnet.neighbors import radius_neighbors
from voxfrac.kpnet.train import TrainConfig, predict_cloud
from voxfrac.kpnet.train import train as train_net
from voxfrac.lidarsim import SensorConfig, cast_rays, voxel_fractions
from voxfrac.mesh import MATERIALS, Material, mesh_material_areas
from voxfrac.metrics import evaluate_model, evaluate_predictions, mean_baseline, stratified_mae
from voxfrac.objective import LossConfig, Metric, focalr, total_loss, wmse
from voxfrac.pipeline import RunConfig, bench, fit, run_size, separable_set, split_dataset
from voxfrac.relevance import dbr_weights
from voxfrac.scenegen import generate_scene
from voxfrac.voxelizer import VoxelGridSpec, voxelize_exact, voxelize_sampled


def test_criterion_1_voxelization(verdict):
    t0 = time.perf_counter()
    spec = VoxelGridSpec((0, 0, 0), 1.0, (10, 10, 10))
    worst_bound = 0.0
    worst_sampled = worst_exact = 0.0
    for seed in range(50):
        mesh = random_soup(np.random.default_rng(seed), 1000, min_area=1.0 / 16)
        exact = voxelize_exact(mesh, spec)
        sampled = voxelize_sampled(mesh, spec, seed)
        bound = binomial_bound_grid(mesh, spec.origin, spec.voxel_size, spec.dims)
        excess = np.abs(sampled.to_dense() - exact.to_dense()) - bound
        worst_bound = max(worst_bound, float(excess.max()))
        areas = mesh_material_areas(mesh)
        for m in Material:
            worst_exact = max(worst_exact, abs(exact.totals()[m] - areas[m]) / areas[m])
            worst_sampled = max(worst_sampled, abs(sampled.totals()[m] - areas[m]) / areas[m])
    seconds = time.perf_counter() - t0
    ok = worst_bound <= 1e-12 and worst_sampled <= 0.005 and worst_exact <= 1e-9 and seconds < 60
    verdict(1, ok, f"max excess over bound {worst_bound:.2e}, conservation sampled {worst_sampled:.2e} "
                   f"exact {worst_exact:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_2_energy(verdict):
    cfg = RunConfig()
    mesh = generate_scene(cfg.scene_config())
    spec = VoxelGridSpec.covering((0, 0, 0), cfg.scene.extent, 1.0)
    waves = cast_rays(mesh, spec, SensorConfig(), 0, voxelize_exact(mesh, spec))
    energy = max(abs(w.total() + w.escaped - w.emitted) / w.emitted for w in waves)
    tiled = [i for i, w in enumerate(waves) if w.escaped == 0 and w.total() > 0]
    tele = max(abs(np.sum((r := voxel_fractions(waves[i], spec, i)).f_scatter * r.f_remaining) - 1) for i in tiled)
    ok = len(waves) >= 10_000 and energy <= 1e-6 and tele <= 1e-6
    verdict(2, ok, f"{len(waves)} rays, energy rel err {energy:.2e}, telescoping err {tele:.2e} "
                   f"over {len(tiled)} tiled rays")
    assert ok


def test_criterion_3_dbr(verdict):
    rng = np.random.default_rng(0)
    ok = np.allclose(dbr_weights([60, 30, 10], 3).bin_weights, [0.4082, 0.5774, 1.0], atol=1e-3)
    ok &= np.allclose(dbr_weights([999, 1], 2).bin_weights, [0.0316, 1.0], atol=1e-3)
    ok &= dbr_weights([13] * 100).bin_weights.tolist() == [1.0] * 100
    bad = 0
    for _ in range(1000):
        d = rng.integers(1, 5000, size=int(rng.integers(2, 100)))
        g = dbr_weights(d).bin_weights
        order = np.argsort(d, kind="stable")
        ds, gs = d[order], g[order]
        strictly = np.all(np.diff(gs)[np.diff(ds) > 0] < 0) and np.all(np.diff(gs) <= 1e-15)
        scaled = dbr_weights(d * int(rng.integers(2, 1000))).bin_weights
        if not (strictly and np.allclose(scaled, g, rtol=1e-12, atol=0) and g.max() == 1.0):
            bad += 1
    ok = bool(ok) and bad == 0
    verdict(3, ok, f"hand tables and uniform case checked, {bad} of 1000 random histograms violate properties")
    assert ok


def _small_net_case(seed):
    rng = np.random.default_rng(seed)
    net = KpNetwork.create(NetworkConfig(voxel_size=1.0, stages=2, base_channels=4, kernel_points=5,
                                         input_sphere_radius=6.0, seed=seed))
    pts = np.floor(rng.uniform(0, 4, size=(30, 3))) + 0.5 + rng.normal(scale=0.05, size=(30, 3))
    feats = np.column_stack([np.ones(30), rng.random(30)])
    return rng, net, pts, feats, rng.dirichlet(np.ones(4), 30), rng.random((30, 4)) + 0.1


def test_criterion_4_gradients(verdict):
    t0 = time.perf_counter()
    worst_layer = worst_e2e = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 65))
        o, p, w = rng.random(n), rng.random(n), rng.random(n) + 0.1
        for cfg in (LossConfig(), LossConfig(focalr_gamma=2.0), LossConfig(focalr_gamma=2.0, focalr_as_written=True)):
            worst_layer = max(worst_layer,
                              rel_error(wmse(o, p, w, cfg)[1], numeric_grad(lambda: wmse(o, p, w, cfg)[0], p)),
                              rel_error(focalr(o, p, cfg)[1], numeric_grad(lambda: focalr(o, p, cfg)[0], p)))
        s = rng.uniform(-1, 1, size=(8, 3))
        q = rng.uniform(-0.5, 0.5, size=(4, 3))
        nb = radius_neighbors(q, s, 1.5, 5)
        kp = init_kernel_points(3, rng_seed=seed).points * 0.8
        f, W = rng.random((8, 2)), rng.normal(size=(3, 2, 2))
        up = rng.normal(size=(4, 2))
        gf, gw = L.kpconv_backward(up, L.kpconv_forward(q, s, nb, f, kp, 0.6, W)[1])
        conv = lambda: float(np.sum(L.kpconv_forward(q, s, nb, f, kp, 0.6, W)[0] * up))
        worst_layer = max(worst_layer, rel_error(gf, numeric_grad(conv, f)), rel_error(gw, numeric_grad(conv, W)))
        x, Wu = rng.normal(size=(12, 3)), rng.normal(size=(3, 4))
        state = L.NormState(rng.random(4) + 0.5, rng.normal(size=4))
        up = rng.normal(size=(12, 4))
        gx, gwu, _, _ = L.unary_backward(up, L.unary_forward(x, Wu, state, True)[1])
        un = lambda: float(np.sum(L.unary_forward(x, Wu, L.NormState(state.gamma, state.beta), True)[0] * up))
        worst_layer = max(worst_layer, rel_error(gx, numeric_grad(un, x)), rel_error(gwu, numeric_grad(un, Wu)))

        _, net, pts, feats, tgt, wt = _small_net_case(seed)
        geo = build_geometry(pts, net.config)
        lcfg = LossConfig(focalr_enabled=True)
        probs, cache = net.forward(pts, feats, training=True, geometry=geo)
        grads = net.backward(total_loss(tgt, probs, wt, 0.0, lcfg)[1], cache)
        loss = lambda: total_loss(tgt, net.forward(pts, feats, True, geo)[0], wt, 0.0, lcfg)[0].total
        keys = sorted(grads)
        worst_e2e = max(worst_e2e, rel_error(np.concatenate([grads[k].ravel() for k in keys]),
                                             np.concatenate([numeric_grad(loss, net.params[k]).ravel() for k in keys])))
    seconds = time.perf_counter() - t0
    ok = worst_layer < 1e-5 and worst_e2e < 1e-4 and seconds < 120
    verdict(4, ok, f"20 seeds, worst layer rel err {worst_layer:.2e}, end-to-end {worst_e2e:.2e}, {seconds:.1f}s")
    assert ok


def test_criterion_5_structure(verdict):
    rng = np.random.default_rng(5)
    row_err = 0.0
    for seed in range(5):
        _, net, pts, feats, _, _ = _small_net_case(seed)
        row_err = max(row_err, float(np.abs(net.predict(pts, feats).sum(axis=1) - 1).max()))
    row_err = max(row_err, float(np.abs(L.softmax(rng.normal(scale=30, size=(1000, 4))).sum(axis=1) - 1).max()))
    perm_err = trans_err = 0.0
    for _ in range(20):
        s = rng.uniform(-1, 1, size=(20, 3))
        q = rng.uniform(-0.5, 0.5, size=(5, 3))
        nb = radius_neighbors(q, s, 1.5, 12)
        kp = init_kernel_points(7, rng_seed=1).points
        f, W = rng.random((20, 3)), rng.normal(size=(7, 3, 2))
        base = L.kpconv_forward(q, s, nb, f, kp, 0.6, W)[0]
        perm = rng.permutation(20)
        inv = np.argsort(perm)
        nb2 = np.where(nb < 20, inv[np.minimum(nb, 19)], 20)
        perm_err = max(perm_err, float(np.abs(L.kpconv_forward(q, s[perm], nb2, f[perm], kp, 0.6, W)[0] - base).max()))
        t = rng.uniform(-1000, 1000, size=3)
        trans_err = max(trans_err, float(np.abs(L.kpconv_forward(q + t, s + t, nb, f, kp, 0.6, W)[0] - base).max()))
    mismatched = 0
    for seed in range(3):
        r = np.random.default_rng(seed)
        s = r.uniform(0, 10, size=(2000, 3))
        nb = radius_neighbors(s, s, 0.8, 2000)
        for row, want in zip(nb, brute_force_neighbors(s, s, 0.8)):
            mismatched += set(row[row < 2000].tolist()) != want
    ok = row_err <= 1e-6 and perm_err <= 1e-12 and trans_err <= 1e-9 and mismatched == 0
    verdict(5, ok, f"softmax row err {row_err:.1e}, permutation {perm_err:.1e}, translation {trans_err:.1e}, "
                   f"{mismatched} neighbor rows differ from brute force")
    assert ok


def test_criterion_6_metrics(verdict):
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 500))
        o = rng.beta(rng.uniform(0.2, 3), rng.uniform(0.2, 3), n)
        rep = stratified_mae(o, np.clip(o + rng.normal(scale=0.1, size=n), 0, 1))
        rec = sum(rep.counts[k] * v for k, v in rep.mae.items() if v is not None) / n
        worst = max(worst, abs(rec - rep.mae_overall))
    o = np.concatenate([np.full(960, 0.905), np.full(35, 0.505), np.full(5, 0.1)])
    p = o.copy()
    p[-5:] = 0.0
    rep = stratified_mae(o, p)
    ok = worst <= 1e-12 and rep.mae_sparse == 0.1 and rep.mae_overall == 0.0005
    verdict(6, ok, f"recombination err {worst:.1e}; worked example MAE_s={rep.mae_sparse!r} MAE={rep.mae_overall!r}")
    assert ok


@pytest.mark.slow
def test_criterion_7_learning(verdict, default_dataset_1m):
    t0 = time.perf_counter()
    pts, feats, targets = separable_set()
    net = KpNetwork.create(NetworkConfig(voxel_size=1.0, stages=2, base_channels=8, kernel_points=5,
                                         input_sphere_radius=6.0))
    mse = [math.inf]

    def check(epoch, n):
        if epoch % 10 == 9:
            mse.append(float(np.mean((predict_cloud(n, pts, feats) - targets) ** 2)))
            return mse[-1] < 0.01
        return False

    train_net(net, pts, feats, targets, loss_cfg=LossConfig(wmse_extra_inv_n=False),
              cfg=TrainConfig(epochs=200, steps_per_epoch=5, spheres_per_batch=2), on_epoch_end=check)
    cfg, ds = default_dataset_1m
    # an absolute-error loss matches the reported metric; squared error barely pushes the
    # near-zero misc output below the mean baseline's tiny constant
    cfg = replace(cfg, loss=replace(cfg.loss, regression_metric=Metric.L1))
    train_ds, _, val_ds, _ = split_dataset(ds, cfg)
    model, _ = fit(train_ds, cfg, 1.0, val_ds=val_ds)
    reports, _ = evaluate_model(model, ds)
    baseline = evaluate_predictions(ds.targets, mean_baseline(ds.targets))
    beats = {k: reports[k].mae_overall < baseline[k].mae_overall for k in reports}
    seconds = time.perf_counter() - t0
    ok = mse[-1] < 0.01 and all(beats.values()) and seconds < 600
    detail = ", ".join(f"{k} {reports[k].mae_overall:.4f} vs {baseline[k].mae_overall:.4f}" for k in reports)
    verdict(7, ok, f"separable MSE {mse[-1]:.4f} after {10 * (len(mse) - 1)} epochs; model vs mean MAE: {detail}; "
                   f"{seconds:.0f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_voxel_size_trend(verdict):
    t0 = time.perf_counter()
    wins = 0
    rows = []
    for seed in range(5):
        cfg = RunConfig(seed=seed, scene_seed=0)
        mesh = generate_scene(cfg.scene_config())
        fine = run_size(cfg, 0.5, mesh).reports
        coarse = run_size(cfg, 2.0, mesh).reports
        won = all(coarse[k].mae_sparse < fine[k].mae_sparse for k in ("bark", "leaf"))
        wins += won
        rows.append(f"seed {seed}: bark {fine['bark'].mae_sparse:.3f}->{coarse['bark'].mae_sparse:.3f} "
                    f"leaf {fine['leaf'].mae_sparse:.3f}->{coarse['leaf'].mae_sparse:.3f}")
    seconds = time.perf_counter() - t0
    ok = wins >= 4 and seconds < 45 * 60
    verdict(8, ok, f"{wins}/5 replicates with lower sparse MAE at 2 m ({'; '.join(rows)}); {seconds / 60:.1f} min")
    assert ok


def test_criterion_9_split(verdict):
    spec = VoxelGridSpec((0, 0, 0), 10.0, (50, 70, 1))
    idx = np.stack(np.meshgrid(np.arange(50), np.arange(70), [0], indexing="ij"), -1).reshape(-1, 3)
    pos = spec.centers(idx)
    targets = np.tile([0.0, 0.0, 1.0, 0.0], (len(idx), 1))
    ds = VoxelDataset(spec, idx, pos, np.zeros(len(idx)), targets, np.zeros(len(idx), dtype=np.int64))
    train, test, a = block_split(ds, 100.0, 10 / 35, seed=0)
    n = SectionGrid.for_grid(spec, 100.0).n_sections
    ok = (n, len(a.train_sections), len(a.test_sections)) == (35, 25, 10) and len(train) + len(test) == len(ds)
    ok &= not set(a.train_sections) & set(a.test_sections)
    verdict(9, ok, f"{n} sections -> {len(a.train_sections)} train + {len(a.test_sections)} test")
    assert ok


def test_criterion_10_bench(verdict):
    configs = {f"C{c}": NetworkConfig(voxel_size=1.0, stages=3, base_channels=c, kernel_points=15)
               for c in (8, 16)}
    table = bench(configs, batches=5, points=300, warmup=1)
    counts = table.column("parameters")
    closed = table.column("closed_form")
    ok = counts == closed == [parameter_count(c) for c in configs.values()] and len(table.rows) >= 2
    ok &= all(t > 0 for t in table.column("mean_seconds"))
    verdict(10, ok, f"parameters {counts} match closed form {closed}; timing rows {len(table.rows)}")
    assert ok
