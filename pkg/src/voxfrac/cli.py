"""Command line entry point: ``voxfrac <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid input or configuration and 2 for
failures while running.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class UsageError(ValueError):
    pass


def _common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON run configuration (schema vf-config/1)")
    parser.add_argument("--seed", type=int, default=d(None), help="master seed (overrides the config)")
    parser.add_argument("--out", default=d(None), help="output directory (default: content-addressed run dir)")
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="single-threaded numerics for bit-reproducible runs")
    parser.add_argument("--threads", type=int, default=d(None), help="BLAS/OpenMP thread count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxfrac", description="Voxel material-fraction regression toolkit.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _common(p, suppress=True)
        return p

    add("gen-scene", "generate the synthetic forest mesh")
    for name, text in (("voxelize", "per-voxel material areas"), ("simulate", "simulated per-voxel intensity")):
        p = add(name, text)
        p.add_argument("--mesh", help="mesh file (.vfm or .obj); generated from the config if omitted")
        p.add_argument("--voxel-size", type=float, action="append", help="voxel size in m (repeatable)")
    add("dataset", "build datasets and manifest for every configured voxel size")
    p = add("train", "train a network on one dataset")
    p.add_argument("--dataset", help="VXD1 dataset (default: dataset_<size>.vxd in the output dir)")
    p.add_argument("--voxel-size", type=float, help="voxel size selecting the default dataset")
    p = add("eval", "evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    add("sweep", "voxel-size sensitivity sweep")
    p = add("ablate", "train one model per value of an ablation axis")
    p.add_argument("--axis", required=True, choices=("loss_metric", "weighting", "focalr", "K", "R"))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--voxel-size", type=float)
    p = add("bench", "parameter counts and training-step timing")
    p.add_argument("--channels", default="32,64", help="comma-separated base channel counts")
    p.add_argument("--batches", type=int, default=1000)
    p.add_argument("--points", type=int, default=1000)
    p.add_argument("--warmup", type=int, default=10)
    p = add("export-plots", "write CSV tables for external plotting")
    p.add_argument("--dataset", action="append", help="VXD1 dataset(s); default: all datasets in the output dir")
    return parser


def _set_threads(args) -> None:
    n = 1 if args.deterministic else args.threads
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be >= 1")
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _load_config(args):
    from voxfrac.pipeline import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def _out_dir(args, cfg) -> Path:
    out = Path(args.out) if args.out else cfg.run_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _mesh(args, cfg):
    from voxfrac.mesh import read_obj, read_vfm
    from voxfrac.scenegen import generate_scene

    if getattr(args, "mesh", None):
        p = Path(args.mesh)
        if not p.is_file():
            raise UsageError(f"mesh file not found: {p}")
        return read_obj(p) if p.suffix.lower() == ".obj" else read_vfm(p)
    return generate_scene(cfg.scene_config())


def _sizes(args, cfg) -> list[float]:
    return list(args.voxel_size) if getattr(args, "voxel_size", None) else list(cfg.voxel_sizes)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=str))


# -- subcommands ----------------------------------------------------------------------------

def cmd_gen_scene(args, cfg, out):
    from voxfrac.mesh import write_obj, write_vfm
    from voxfrac.scenegen import generate_scene, scene_summary

    mesh = generate_scene(cfg.scene_config())
    write_vfm(mesh, out / "scene.vfm")
    write_obj(mesh, out / "scene.obj")
    summary = scene_summary(mesh)
    (out / "scene_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str))
    _print({"mesh": str(out / "scene.vfm"), "triangles": mesh.n_triangles})


def cmd_voxelize(args, cfg, out):
    from voxfrac.pipeline import derive_seed, grid_for
    from voxfrac.voxelizer import voxelize_exact, voxelize_sampled, write_area_csv, write_area_grid

    mesh = _mesh(args, cfg)
    written = []
    for vs in _sizes(args, cfg):
        spec = grid_for(cfg, vs)
        if cfg.voxelizer == "exact":
            grid = voxelize_exact(mesh, spec)
        else:
            grid = voxelize_sampled(mesh, spec, derive_seed(cfg.seed, "voxelize", vs))
        tag = f"{vs:g}m"
        write_area_grid(grid, out / f"areas_{tag}.vxa")
        write_area_csv(grid, out / f"areas_{tag}.csv")
        written.append({"voxel_size": vs, "occupied": grid.n_occupied, "file": str(out / f"areas_{tag}.vxa")})
    _print(written)


def cmd_simulate(args, cfg, out):
    from voxfrac.lidarsim import simulate_intensity, write_intensity_grid
    from voxfrac.pipeline import derive_seed, grid_for
    from voxfrac.voxelizer import voxelize_exact

    mesh = _mesh(args, cfg)
    written = []
    for vs in _sizes(args, cfg):
        spec = grid_for(cfg, vs)
        grid = simulate_intensity(mesh, spec, cfg.sensor, derive_seed(cfg.seed, "sensor", vs), voxelize_exact(mesh, spec))
        tag = f"{vs:g}m"
        write_intensity_grid(grid, out / f"intensity_{tag}.vxa")
        written.append({"voxel_size": vs, "voxels": int(len(grid.index)), "file": str(out / f"intensity_{tag}.vxa")})
    _print(written)


def cmd_dataset(args, cfg, out):
    from voxfrac.pipeline import build_all

    _, manifest = build_all(cfg, out)
    _print([{"voxel_size": e.voxel_size, "rows": e.rows, "train": e.train_rows, "test": e.test_rows}
            for e in manifest.entries])


def _dataset_path(args, cfg, out) -> Path:
    if args.dataset:
        p = Path(args.dataset)
    else:
        vs = args.voxel_size if args.voxel_size else cfg.voxel_sizes[0]
        p = out / f"dataset_{vs:g}m.vxd"
    if not p.is_file():
        raise UsageError(f"dataset file not found: {p}")
    return p


def cmd_train(args, cfg, out):
    from voxfrac.dataset import read_vxd
    from voxfrac.pipeline import fit, split_dataset

    ds = read_vxd(_dataset_path(args, cfg, out))
    train_ds, test_ds, val_ds, _ = split_dataset(ds, cfg)
    net, result = fit(train_ds, cfg, ds.spec.voxel_size, out, val_ds)
    _print({"checkpoint": str(out / f"model_{ds.spec.voxel_size:g}m.vfk"), "steps": len(result.history),
            "final_loss": result.final_loss, "train_rows": len(train_ds), "test_rows": len(test_ds)})


def cmd_eval(args, cfg, out):
    from voxfrac.dataset import read_vxd
    from voxfrac.kpnet.network import KpNetwork
    from voxfrac.metrics import evaluate_model, evaluate_predictions, mean_baseline, write_error_dump, write_reports
    from voxfrac.pipeline import split_dataset
    from voxfrac.relevance import HistogramSpec

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    ds = read_vxd(_dataset_path(args, cfg, out))
    net = KpNetwork.load(ckpt)
    if args.split != "all":
        train_ds, test_ds, _, _ = split_dataset(ds, cfg)
        ds = test_ds if args.split == "test" else train_ds
    hist = HistogramSpec(cfg.relevance.bin_count)
    reports, preds = evaluate_model(net, ds, hist)
    tag = f"{ds.spec.voxel_size:g}m_{args.split}"
    paths = write_reports(reports, out, prefix=f"eval_{tag}_")
    write_reports(evaluate_predictions(ds.targets, mean_baseline(ds.targets), hist), out, prefix=f"baseline_{tag}_")
    write_error_dump(ds, preds, out / f"errors_{tag}.csv")
    _print({"reports": paths, **{k: r.summary() for k, r in reports.items()}})


def cmd_sweep(args, cfg, out):
    from voxfrac.pipeline import sweep_voxel_sizes

    table = sweep_voxel_sizes(cfg, out)
    sys.stdout.write(table.to_csv())
    if table.failures:
        _print({"failures": table.failures})


def cmd_ablate(args, cfg, out):
    from voxfrac.pipeline import ablate

    values = [v.strip() for v in args.values.split(",") if v.strip()]
    table = ablate(cfg, args.axis, values, args.voxel_size, out)
    sys.stdout.write(table.to_csv())
    if table.failures:
        _print({"failures": table.failures})


def cmd_bench(args, cfg, out):
    from voxfrac.pipeline import bench

    vs = cfg.voxel_sizes[0]
    configs = {}
    for c in args.channels.split(","):
        settings = cfg.network
        ncfg = settings.network_config(vs, cfg.seed)
        ncfg.base_channels = int(c)
        configs[f"C{int(c)}"] = ncfg
    table = bench(configs, args.batches, args.points, args.warmup, cfg.seed)
    (out / "bench.csv").write_text(table.to_csv())
    sys.stdout.write(table.to_csv())


def cmd_export_plots(args, cfg, out):
    from voxfrac.dataset import read_vxd
    from voxfrac.mesh import MATERIALS
    from voxfrac.relevance import HistogramSpec, Method, RelevanceError, relevance_table, write_table_csv

    paths = [Path(p) for p in args.dataset] if args.dataset else sorted(out.glob("dataset_*.vxd"))
    if not paths:
        raise UsageError(f"no datasets found in {out}; run `voxfrac dataset` first or pass --dataset")
    spec = HistogramSpec(cfg.relevance.bin_count)
    written = []
    for p in paths:
        if not p.is_file():
            raise UsageError(f"dataset file not found: {p}")
        ds = read_vxd(p)
        tag = f"{ds.spec.voxel_size:g}m"
        hist_path = out / f"histograms_{tag}.csv"
        with open(hist_path, "w") as fh:
            fh.write("target,bin_center,count,density\n")
            for name, counts in ds.histograms(spec).items():
                total = sum(counts)
                for c, n in zip(spec.centers, counts):
                    fh.write(f"{name},{float(c)!r},{n},{(n / total if total else 0.0)!r}\n")
        written.append(str(hist_path))
        for method in Method:
            for m in MATERIALS:
                try:
                    table = relevance_table(method, ds.targets[:, m], spec, cfg.relevance.merge_threshold)
                except RelevanceError:
                    continue
                path = out / f"relevance_{method.value}_{m.label}_{tag}.csv"
                write_table_csv(table, path, spec)
                written.append(str(path))
    _print({"written": written})


COMMANDS = {
    "gen-scene": cmd_gen_scene, "voxelize": cmd_voxelize, "simulate": cmd_simulate, "dataset": cmd_dataset,
    "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate, "bench": cmd_bench,
    "export-plots": cmd_export_plots,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    try:
        _set_threads(args)
        cfg = _load_config(args)
        out = _out_dir(args, cfg)
    except (ValueError, OSError) as exc:
        print(f"voxfrac: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        COMMANDS[args.command](args, cfg, out)
    except (UsageError, FileNotFoundError) as exc:
        print(f"voxfrac: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"voxfrac: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else is a runtime failure
        print(f"voxfrac: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
