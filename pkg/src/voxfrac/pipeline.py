"""Run configuration and end-to-end orchestration.

A run goes scene -> voxel areas -> simulated intensity -> dataset -> block
split -> training -> stratified evaluation.  Every random draw is seeded from
``RunConfig.seed`` through :func:`derive_seed`, so tables are pure functions
of the configuration.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
import traceback
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from voxfrac.dataset import (
    DatasetManifest,
    ManifestEntry,
    VoxelDataset,
    block_split,
    file_sha256,
    join_dataset,
    write_dataset_csv,
    write_vxd,
)
from voxfrac.kpnet.network import KpNetwork, NetworkConfig, NetworkError, parameter_count
from voxfrac.kpnet.train import TrainConfig, TrainResult, evaluate_loss, sgd_step, train
from voxfrac.lidarsim import SensorConfig, simulate_intensity
from voxfrac.mesh import MATERIALS, TriangleMesh
from voxfrac.metrics import (
    EvalReport,
    evaluate_model,
    evaluate_predictions,
    mean_baseline,
    write_error_dump,
    write_reports,
)
from voxfrac.objective import LossConfig, Weighting
from voxfrac.relevance import HistogramSpec, RelevanceError, relevance_table, sample_weights
from voxfrac.scenegen import SceneConfig, generate_scene
from voxfrac.voxelizer import VoxelGridSpec, areas_to_fractions, voxelize_exact, voxelize_sampled

SCHEMA = "vf-config/1"
ABLATION_AXES = ("loss_metric", "weighting", "focalr", "K", "R")


class ConfigError(ValueError):
    pass


def derive_seed(seed: int, *labels) -> int:
    """Stable 32-bit child seed for a named stage of a run."""
    key = json.dumps([int(seed), *[str(v) for v in labels]]).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little")


@dataclass
class SplitConfig:
    section_size: float = 10.0
    test_fraction: float = 10 / 35
    validation_fraction: float = 0.0
    patience: int = 5


@dataclass
class RelevanceConfig:
    bin_count: int = 100
    merge_threshold: float | None = None


@dataclass
class NetworkSettings:
    """Voxel-size independent network settings; R is given in voxel units."""

    stages: int = 3
    base_channels: int = 32
    kernel_points: int = 15
    first_radius_ratio: float = 2.5
    sigma_ratio: float = 0.3
    max_neighbors: int = 40
    input_sphere_ratio: float = 12.0

    def network_config(self, voxel_size: float, seed: int) -> NetworkConfig:
        return NetworkConfig(voxel_size=voxel_size, stages=self.stages, base_channels=self.base_channels,
                             kernel_points=self.kernel_points, first_radius_ratio=self.first_radius_ratio,
                             sigma_ratio=self.sigma_ratio, max_neighbors=self.max_neighbors,
                             input_sphere_radius=self.input_sphere_ratio * voxel_size, seed=seed)


def _default_loss() -> LossConfig:
    return LossConfig(wmse_extra_inv_n=False)


def _default_training() -> TrainConfig:
    return TrainConfig(epochs=30, steps_per_epoch=20, spheres_per_batch=2)


@dataclass
class RunConfig:
    seed: int = 0
    scene: SceneConfig = field(default_factory=SceneConfig)
    scene_seed: int | None = None
    voxel_sizes: list[float] = field(default_factory=lambda: [1.0])
    voxelizer: str = "exact"
    sensor: SensorConfig = field(default_factory=SensorConfig)
    relevance: RelevanceConfig = field(default_factory=RelevanceConfig)
    loss: LossConfig = field(default_factory=_default_loss)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    training: TrainConfig = field(default_factory=_default_training)
    split: SplitConfig = field(default_factory=SplitConfig)
    output_dir: str = "runs"

    # -- validation and (de)serialization -----------------------------------------

    def validate(self) -> None:
        self.scene.validate()
        self.sensor.validate()
        self.loss.validate()
        self.training.validate()
        if not self.voxel_sizes:
            raise ConfigError("voxel_sizes must not be empty")
        if any(not v > 0 for v in self.voxel_sizes):
            raise ConfigError("voxel sizes must be positive")
        if self.voxelizer not in ("exact", "sampled"):
            raise ConfigError(f"voxelizer must be 'exact' or 'sampled', got {self.voxelizer!r}")
        HistogramSpec(self.relevance.bin_count)
        if not self.split.section_size > 0:
            raise ConfigError("split.section_size must be positive")
        if not 0 <= self.split.test_fraction < 1:
            raise ConfigError("split.test_fraction must be in [0, 1)")
        for vs in self.voxel_sizes:
            self.network.network_config(vs, 0).validate()

    def scene_config(self) -> SceneConfig:
        seed = self.scene_seed if self.scene_seed is not None else derive_seed(self.seed, "scene")
        return replace(self.scene, rng_seed=seed)

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA,
            "seed": self.seed,
            "scene": self.scene.to_dict(),
            "scene_seed": self.scene_seed,
            "voxel_sizes": list(self.voxel_sizes),
            "voxelizer": self.voxelizer,
            "sensor": self.sensor.to_dict(),
            "relevance": asdict(self.relevance),
            "loss": self.loss.to_dict(),
            "network": asdict(self.network),
            "training": self.training.to_dict(),
            "split": asdict(self.split),
            "output_dir": self.output_dir,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        schema = d.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ConfigError(f"unsupported config schema {schema!r}; expected {SCHEMA!r}")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        sub = {
            "scene": SceneConfig.from_dict,
            "sensor": lambda v: SensorConfig(**v),
            "relevance": lambda v: RelevanceConfig(**v),
            "loss": lambda v: LossConfig(**v),
            "network": lambda v: NetworkSettings(**v),
            "training": lambda v: TrainConfig(**v),
            "split": lambda v: SplitConfig(**v),
        }
        try:
            for key, make in sub.items():
                if key in d:
                    d[key] = make(d[key])
            if "voxel_sizes" in d:
                d["voxel_sizes"] = [float(v) for v in d["voxel_sizes"]]
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    def digest(self) -> str:
        body = self.to_dict()
        body.pop("output_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    def run_dir(self) -> Path:
        """Content-addressed directory for this configuration's products."""
        return Path(self.output_dir) / f"run-{self.digest()[:12]}"


# -- dataset assembly ---------------------------------------------------------------------

def grid_for(cfg: RunConfig, voxel_size: float) -> VoxelGridSpec:
    return VoxelGridSpec.covering((0.0, 0.0, 0.0), cfg.scene.extent, voxel_size)


def build_dataset(mesh: TriangleMesh, voxel_size: float, cfg: RunConfig) -> VoxelDataset:
    spec = grid_for(cfg, voxel_size)
    if cfg.voxelizer == "exact":
        areas = voxelize_exact(mesh, spec)
    else:
        areas = voxelize_sampled(mesh, spec, derive_seed(cfg.seed, "voxelize", voxel_size))
    intensity = simulate_intensity(mesh, spec, cfg.sensor, derive_seed(cfg.seed, "sensor", voxel_size), areas)
    return join_dataset(areas_to_fractions(areas), intensity, cfg.split.section_size)


def split_dataset(ds: VoxelDataset, cfg: RunConfig):
    """(train, test, validation or None, assignment) for a run."""
    out = block_split(ds, cfg.split.section_size, cfg.split.test_fraction, derive_seed(cfg.seed, "split"),
                      cfg.split.validation_fraction)
    if len(out) == 4:
        train_ds, test_ds, assignment, val_ds = out
    else:
        (train_ds, test_ds, assignment), val_ds = out, None
    return train_ds, test_ds, val_ds, assignment


def _size_tag(voxel_size: float) -> str:
    return f"{voxel_size:g}m"


def write_dataset_files(ds: VoxelDataset, cfg: RunConfig, out_dir: Path, manifest: DatasetManifest) -> Path:
    tag = _size_tag(ds.spec.voxel_size)
    vxd = out_dir / f"dataset_{tag}.vxd"
    csv_path = out_dir / f"dataset_{tag}.csv"
    write_vxd(ds, vxd)
    write_dataset_csv(ds, csv_path)
    train_ds, test_ds, val_ds, a = split_dataset(ds, cfg)
    hist = HistogramSpec(cfg.relevance.bin_count)
    manifest.entries.append(ManifestEntry(
        voxel_size=ds.spec.voxel_size, rows=len(ds), train_rows=len(train_ds), test_rows=len(test_ds),
        validation_rows=0 if val_ds is None else len(val_ds), split=a.to_dict(),
        files={"vxd": vxd.name, "csv": csv_path.name},
        sha256={"vxd": file_sha256(vxd), "csv": file_sha256(csv_path)},
        histograms=ds.histograms(hist),
    ))
    return vxd


def build_all(cfg: RunConfig, out_dir=None) -> tuple[dict[float, VoxelDataset], DatasetManifest]:
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    mesh = generate_scene(cfg.scene_config())
    manifest = DatasetManifest()
    datasets = {}
    for vs in cfg.voxel_sizes:
        ds = build_dataset(mesh, vs, cfg)
        write_dataset_files(ds, cfg, out, manifest)
        datasets[vs] = ds
    manifest.write(out / "manifest.json")
    (out / "config.json").write_text(cfg.to_json())
    return datasets, manifest


# -- training and evaluation ---------------------------------------------------------------

def target_weights(train_ds: VoxelDataset, cfg: RunConfig) -> np.ndarray | None:
    """Per-sample, per-target relevance weights from the training targets.

    A target whose relevance cannot be fitted (for example a constant
    column) gets uniform weights.
    """
    method = cfg.loss.weighting
    if method is Weighting.NONE:
        return None
    spec = HistogramSpec(cfg.relevance.bin_count)
    w = np.ones_like(train_ds.targets)
    for m in MATERIALS:
        col = train_ds.targets[:, m]
        try:
            table = relevance_table(method.value, col, spec, cfg.relevance.merge_threshold)
        except RelevanceError:
            continue
        w[:, m] = sample_weights(table, col, spec)
    return w


def fit(train_ds: VoxelDataset, cfg: RunConfig, voxel_size: float, out_dir=None,
        val_ds: VoxelDataset | None = None) -> tuple[KpNetwork, TrainResult]:
    if len(train_ds) == 0:
        raise ConfigError("training split is empty")
    net = KpNetwork.create(cfg.network.network_config(voxel_size, derive_seed(cfg.seed, "init", voxel_size)))
    tcfg = replace(cfg.training, seed=derive_seed(cfg.seed, "train", voxel_size))
    weights = target_weights(train_ds, cfg)
    log_path = ckpt = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"train_{_size_tag(voxel_size)}.jsonl"
        ckpt = out / f"model_{_size_tag(voxel_size)}.vfk"

    stopper = None
    if val_ds is not None and len(val_ds):
        state = {"best": np.inf, "params": None, "stale": 0}

        def stopper(epoch, net):
            loss = evaluate_loss(net, val_ds.position, val_ds.features(), val_ds.targets, None, cfg.loss).total
            if loss < state["best"]:
                state.update(best=loss, stale=0, params={k: v.copy() for k, v in net.params.items()},
                             buffers={k: v.copy() for k, v in net.buffers.items()})
                return False
            state["stale"] += 1
            return state["stale"] >= cfg.split.patience

    fh = open(log_path, "w") if log_path is not None else None
    try:
        result = train(net, train_ds.position, train_ds.features(), train_ds.targets, weights,
                       cfg.loss, tcfg, log=fh, checkpoint_path=ckpt, on_epoch_end=stopper)
    finally:
        if fh is not None:
            fh.close()
    if stopper is not None and state["params"] is not None:
        net.params.update(state["params"])
        net.buffers.update(state["buffers"])
    if ckpt is not None:
        net.save(ckpt)
    return net, result


@dataclass
class SizeResult:
    voxel_size: float
    reports: dict[str, EvalReport]
    baseline: dict[str, EvalReport]
    rows: dict[str, int]
    seconds: dict[str, float]


def run_size(cfg: RunConfig, voxel_size: float, mesh: TriangleMesh | None = None, out_dir=None,
             dataset: VoxelDataset | None = None) -> SizeResult:
    """Build, split, train and evaluate at one voxel size."""
    t0 = time.perf_counter()
    if dataset is None:
        if mesh is None:
            mesh = generate_scene(cfg.scene_config())
        dataset = build_dataset(mesh, voxel_size, cfg)
    t1 = time.perf_counter()
    train_ds, test_ds, val_ds, _ = split_dataset(dataset, cfg)
    net, _ = fit(train_ds, cfg, voxel_size, out_dir, val_ds)
    t2 = time.perf_counter()
    hist = HistogramSpec(cfg.relevance.bin_count)
    reports, preds = evaluate_model(net, test_ds, hist)
    baseline = evaluate_predictions(test_ds.targets, mean_baseline(test_ds.targets), hist)
    if out_dir is not None:
        tag = _size_tag(voxel_size)
        write_reports(reports, out_dir, prefix=f"eval_{tag}_")
        write_reports(baseline, out_dir, prefix=f"baseline_{tag}_")
        write_error_dump(test_ds, preds, Path(out_dir) / f"errors_{tag}.csv")
    t3 = time.perf_counter()
    return SizeResult(voxel_size, reports, baseline,
                      {"train": len(train_ds), "test": len(test_ds), "validation": 0 if val_ds is None else len(val_ds)},
                      {"dataset": t1 - t0, "train": t2 - t1, "eval": t3 - t2})


# -- sweeps and ablations ------------------------------------------------------------------

SWEEP_COLUMNS = ["voxel_size", "target", "mae_sparse", "mae_moderate", "mae_dense", "mae", "status"]
ABLATION_COLUMNS = ["axis", "value", "target", "mae_sparse", "mae_moderate", "mae_dense", "mae", "status"]


def _report_row(rep: EvalReport | None) -> list:
    if rep is None:
        return [None, None, None, None]
    return [rep.mae_sparse, rep.mae_moderate, rep.mae_dense, rep.mae_overall]


def table_csv(columns: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow(["NA" if v is None else (repr(float(v)) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


@dataclass
class Table:
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        return table_csv(self.columns, self.rows)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


def sweep_voxel_sizes(cfg: RunConfig, out_dir=None) -> Table:
    """One full run per voxel size; failures are recorded and the sweep goes on."""
    cfg.validate()
    mesh = generate_scene(cfg.scene_config())
    table = Table(SWEEP_COLUMNS)
    for vs in cfg.voxel_sizes:
        try:
            res = run_size(cfg, vs, mesh, out_dir)
            for m in MATERIALS:
                table.rows.append([vs, m.label, *_report_row(res.reports[m.label]), "ok"])
        except Exception as exc:  # isolate per-size failures
            table.failures[vs] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            for m in MATERIALS:
                table.rows.append([vs, m.label, *_report_row(None), "failed"])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.csv").write_text(table.to_csv())
    return table


def _apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "loss_metric":
        return replace(cfg, loss=replace(cfg.loss, regression_metric=value))
    if axis == "weighting":
        return replace(cfg, loss=replace(cfg.loss, weighting=value))
    if axis == "focalr":
        on = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "on", "yes")
        return replace(cfg, loss=replace(cfg.loss, focalr_enabled=on))
    if axis == "K":
        return replace(cfg, network=replace(cfg.network, kernel_points=int(value)))
    if axis == "R":
        return replace(cfg, network=replace(cfg.network, input_sphere_ratio=float(value)))
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")


def ablate(cfg: RunConfig, axis: str, values, voxel_size: float | None = None, out_dir=None,
           dataset: VoxelDataset | None = None) -> Table:
    """Train one model per axis value on a shared dataset and split."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
    values = list(values)
    if not values:
        raise ConfigError("ablation needs at least one value")
    cfg.validate()
    vs = voxel_size if voxel_size is not None else cfg.voxel_sizes[0]
    variants = [_apply_axis(cfg, axis, v) for v in values]
    for v in variants:
        v.validate()
    if dataset is None:
        dataset = build_dataset(generate_scene(cfg.scene_config()), vs, cfg)
    table = Table(ABLATION_COLUMNS)
    for value, variant in zip(values, variants):
        sub = None if out_dir is None else Path(out_dir) / f"{axis}={value}"
        try:
            res = run_size(variant, vs, out_dir=sub, dataset=dataset)
            for m in MATERIALS:
                table.rows.append([axis, str(value), m.label, *_report_row(res.reports[m.label]), "ok"])
        except Exception as exc:
            table.failures[str(value)] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
            for m in MATERIALS:
                table.rows.append([axis, str(value), m.label, *_report_row(None), "failed"])
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / f"ablation_{axis}.csv").write_text(table.to_csv())
    return table


# -- benchmark -------------------------------------------------------------------------------

BENCH_COLUMNS = ["name", "parameters", "closed_form", "batches", "points", "mean_seconds", "std_seconds"]


def bench_batch(net_cfg: NetworkConfig, n_points: int, rng: np.random.Generator):
    """Random cloud of voxel centers inside one input sphere."""
    R = net_cfg.input_sphere_radius
    vs = net_cfg.voxel_size
    d = rng.normal(size=(n_points, 3))
    d *= (R * rng.random((n_points, 1)) ** (1 / 3)) / np.linalg.norm(d, axis=1, keepdims=True)
    pts = (np.floor(d / vs) + 0.5) * vs
    feats = np.column_stack([np.ones(n_points), rng.random(n_points)])
    targets = rng.dirichlet(np.ones(4), size=n_points)
    return pts, feats, targets


def bench(configs: dict[str, NetworkConfig], batches: int = 1000, points: int = 1000, warmup: int = 10,
          seed: int = 0, loss_cfg: LossConfig | None = None) -> Table:
    """Parameter counts and mean training-step time per configuration."""
    if not configs:
        raise ConfigError("bench needs at least one network configuration")
    loss_cfg = loss_cfg or _default_loss()
    table = Table(BENCH_COLUMNS)
    for name, ncfg in configs.items():
        ncfg.validate()
        net = KpNetwork.create(ncfg)
        rng = np.random.default_rng(derive_seed(seed, "bench", name))
        tcfg = TrainConfig(learning_rate=1e-3)
        velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
        times = []
        for b in range(warmup + batches):
            pts, feats, tgt = bench_batch(ncfg, points, rng)
            t0 = time.perf_counter()
            sgd_step(net, pts, feats, tgt, None, loss_cfg, tcfg.learning_rate, tcfg, velocity)
            if b >= warmup:
                times.append(time.perf_counter() - t0)
        table.rows.append([name, net.n_parameters(), parameter_count(ncfg), batches, points,
                           float(np.mean(times)), float(np.std(times))])
    return table


# -- learning sanity set ------------------------------------------------------------------

def separable_set(n: int = 200, seed: int = 0, voxel_size: float = 1.0):
    """Points on a flat lattice whose intensity alone determines the targets.

    Intensities are uniform on [0, 1); each target row is a normalized
    Gaussian bump around four evenly spaced centers, so fractions vary
    smoothly with intensity and always sum to one.  Returns
    ``(points, features, targets)``.
    """
    rng = np.random.default_rng(seed)
    cols = int(np.ceil(np.sqrt(n / 2)))
    ij = np.stack(np.unravel_index(np.arange(n), (cols, int(np.ceil(n / cols)))), axis=1)
    pts = np.column_stack([(ij + 0.5) * voxel_size, np.full(n, 0.5 * voxel_size)])
    a = rng.random(n)
    t = np.exp(-(((a[:, None] - np.linspace(0.0, 1.0, 4)) / 0.25) ** 2))
    t /= t.sum(axis=1, keepdims=True)
    return pts, np.column_stack([np.ones(n), a]), t


__all__ = [
    "SCHEMA", "ABLATION_AXES", "ConfigError", "RunConfig", "SplitConfig", "RelevanceConfig", "NetworkSettings",
    "derive_seed", "build_dataset", "build_all", "split_dataset", "fit", "run_size", "sweep_voxel_sizes",
    "ablate", "bench", "Table", "NetworkError", "separable_set",
]
