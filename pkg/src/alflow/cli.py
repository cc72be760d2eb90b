"""Command-line interface.

Exit codes: 0 success, 1 validation failure (bad arguments, config or
inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, formats
from .config import DESK_CONFIG, ENV_THREADS, apply_env, experiment_config, load_config, make_oracle
from .engine import (ConfigError, Dataset, approx_disparity, cos_similarity, generate_shapes,
                     run_repetition)
from .geometry import GeometryError, ParamRanges
from .oracle import AnalyticOracle, FluidConstants, OracleError
from .report import PAIRINGS, ReportError, format_table, load_logs, paired_values, write_report
from .stats import wilcoxon_signed_rank
from .surrogate import ModelConfig, TrainConfig, TrainingError, forward, init_model, train

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DATASET_MANIFEST = "manifest.json"
RUN_MANIFEST = "run_manifest.json"

log = logging.getLogger("alflow")


class UsageError(Exception):
    """Invalid user input detected before any computation (exit code 1)."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dumps(obj, **kw) -> str:
    return json.dumps(obj, sort_keys=True, default=_json_default, **kw)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return args.threads
    try:
        return max(1, int(os.environ.get(ENV_THREADS, "1")))
    except ValueError:
        raise UsageError(f"{ENV_THREADS} must be an integer") from None


def _shape_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise UsageError(f"{directory}: not a directory")
    return sorted(directory.glob("*.alfd"))


# --------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    ranges = ParamRanges()
    if args.ranges:
        try:
            ranges = ParamRanges.from_json(json.loads(Path(args.ranges).read_text()))
        except (OSError, json.JSONDecodeError, TypeError) as exc:
            raise UsageError(f"{args.ranges}: cannot load parameter ranges ({exc})") from None
    try:
        ranges.validate()
    except GeometryError as exc:
        raise UsageError(f"invalid parameter ranges: {exc}") from None
    if args.n < 0:
        raise UsageError("--n must be non-negative")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    shapes = generate_shapes(args.n, args.seed, ranges, args.n_interior, args.n_wall, args.n_cap)
    entries = []
    for shape in shapes:
        path = formats.write_shape(out / f"{shape.id}.alfd", shape)
        entries.append({"id": shape.id, "file": path.name, "sha256": formats.sha256_file(path)})
    manifest = {"kind": "alflow-dataset", "version": __version__, "seed": args.seed,
                "n_shapes": len(entries), "ranges": {k: list(v) for k, v in vars(ranges).items()},
                "points": {"interior": args.n_interior, "wall": args.n_wall, "cap": args.n_cap},
                "shapes": entries}
    (out / DATASET_MANIFEST).write_text(_dumps(manifest, indent=1) + "\n")
    print(f"wrote {len(entries)} shapes to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- label

def _label_one(path: Path, oracle: AnalyticOracle, force: bool) -> str:
    target = path.with_suffix(".alfv")
    if target.exists() and not force:
        return "skipped"
    shape = formats.read_shape(path)
    formats.write_field(target, oracle(shape))
    return "labeled"


def cmd_label(args) -> int:
    files = _shape_files(Path(args.dataset))
    oracle = AnalyticOracle(FluidConstants(args.density, args.viscosity), args.inflow, args.noise_sigma)

    def work(path):
        try:
            return path, _label_one(path, oracle, args.force), None
        except (formats.FormatError, OracleError, GeometryError, OSError) as exc:
            return path, "failed", exc

    counts = {"labeled": 0, "skipped": 0, "failed": 0}
    with ThreadPoolExecutor(max_workers=_threads(args)) as pool:
        for path, status, exc in pool.map(work, files):
            counts[status] += 1
            if exc is not None:
                print(f"error: {path}: {exc}", file=sys.stderr)
    print(f"labeled {counts['labeled']}, skipped {counts['skipped']}, failed {counts['failed']}")
    return EXIT_RUNTIME if counts["failed"] else EXIT_OK


# ------------------------------------------------------------ train/predict

def _load_labeled(directory: Path, ids=None):
    samples = []
    for path in _shape_files(directory):
        label = path.with_suffix(".alfv")
        if ids is not None and path.stem not in ids:
            continue
        if not label.exists():
            if ids is not None:
                raise UsageError(f"{path.stem}: no label file {label.name}")
            continue
        shape = formats.read_shape(path)
        samples.append((shape, formats.read_field(label)))
    return samples


def _section(doc: dict, key: str, cls):
    try:
        return cls.from_json(doc.get(key, {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, str(exc)) from None


def cmd_train(args) -> int:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"{args.config}: cannot load config ({exc})") from None
    mcfg = _section(doc, "model", ModelConfig)
    tcfg = _section(doc, "train", TrainConfig)
    overrides = {k: v for k, v in (("steps", args.steps), ("learning_rate", args.lr)) if v is not None}
    tcfg = TrainConfig.from_json({**tcfg.to_json(), **overrides, "seed": args.seed})
    mcfg = ModelConfig.from_json({**mcfg.to_json(), "seed": args.seed})
    ids = set(args.ids.split(",")) if args.ids else None
    samples = _load_labeled(Path(args.dataset), ids)
    if not samples:
        raise UsageError(f"{args.dataset}: no labeled shapes (run `alflow label` first)")
    model = train(init_model(mcfg), samples, tcfg)
    formats.write_model(args.out, model)
    print(f"trained on {len(samples)} shapes, final loss {model.train_log[-1]:.6g}; wrote {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model = formats.read_model(args.model)
    inputs = []
    for item in map(Path, args.shapes):
        inputs.extend(_shape_files(item) if item.is_dir() else [item])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in inputs:
        shape = formats.read_shape(path)
        pred = forward(model, shape)
        formats.write_field(out / f"{shape.id}.alfv", pred)
        summary = {"id": shape.id, "file": str(out / f"{shape.id}.alfv")}
        label = path.with_suffix(".alfv")
        if label.exists():
            gt = formats.read_field(label)
            summary["approx_disp"] = approx_disparity(pred, gt)
            summary["cos_sim"] = cos_similarity(pred, gt)
        print(_dumps(summary))
    return EXIT_OK


# ------------------------------------------------------------------ al-run

def _dataset_from_config(cfg: dict) -> tuple[Dataset, dict]:
    ds = cfg["dataset"]
    oracle = make_oracle(cfg)
    if "path" in ds:
        root = Path(ds["path"])
        files = _shape_files(root)
        need = ds["n_pool"] + ds["n_test"]
        if len(files) < need:
            raise ConfigError("dataset/path", f"{root} holds {len(files)} shapes, {need} needed")
        files = files[:need]
        shapes = [formats.read_shape(p) for p in files]
        labels = {s.id: formats.read_field(p.with_suffix(".alfv"))
                  for s, p in zip(shapes, files) if p.with_suffix(".alfv").exists()}
        digest = hashlib.sha256()
        for p in files:
            digest.update(f"{p.name}:{formats.sha256_file(p)}\n".encode())
        source = {"path": str(root), "files": [p.name for p in files]}
    else:
        shapes = generate_shapes(ds["n_pool"] + ds["n_test"], ds["seed"],
                                 ParamRanges.from_json(ds.get("ranges", {})),
                                 ds["n_interior"], ds["n_wall"], ds["n_cap"])
        labels = {}
        digest = hashlib.sha256()
        for s in shapes:
            digest.update(formats.shape_to_bytes(s))
        source = {"generated": True}
    ids = [s.id for s in shapes]
    dataset = Dataset(shapes, ids[:ds["n_pool"]], ids[ds["n_pool"]:], oracle, labels)
    return dataset, {**source, "sha256": digest.hexdigest()}


def run_al(cfg: dict, out_dir: Path, threads: int = 1, force: bool = False) -> dict:
    """Execute every configured strategy and write logs plus a run manifest."""
    logs_dir = out_dir / "logs"
    if logs_dir.exists() and any(logs_dir.glob("*.ndjson")) and not force:
        raise UsageError(f"{logs_dir} already holds run logs (use --force to overwrite)")
    started = _now()
    dataset, ds_info = _dataset_from_config(cfg)
    snapshot = {k: v for k, v in cfg.items() if k not in ("output_dir", "threads")}
    run_id = hashlib.sha256(_dumps(snapshot).encode()).hexdigest()[:16]
    logs_dir.mkdir(parents=True, exist_ok=True)
    for stale in logs_dir.glob("*.ndjson"):
        stale.unlink()
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(dataset.label, dataset.pool_ids + dataset.test_ids))
    if "gv" in cfg["strategies"]:
        dataset.distance_matrix(cfg["query"]["chamfer_subsample"], threads)

    def one(job):
        strategy, rep = job
        ecfg = experiment_config(cfg, strategy)
        path = logs_dir / f"{strategy}_rep{rep}.ndjson"
        with open(path, "w") as fh:
            def write(rec):
                fh.write(_dumps(rec.to_json()) + "\n")
                fh.flush()
            run_repetition(ecfg, dataset, rep, write)
        return path

    jobs = [(s, r) for s in cfg["strategies"] for r in range(len(cfg["seeds"]))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        paths = list(pool.map(one, jobs))
    manifest = {
        "run_id": run_id, "artifact_version": __version__, "schema_version": 1,
        "config": snapshot, "dataset": ds_info, "started_at": started, "finished_at": _now(),
        "files": [{"path": str(p.relative_to(out_dir)), "sha256": formats.sha256_file(p)}
                  for p in paths],
    }
    (out_dir / RUN_MANIFEST).write_text(_dumps(manifest, indent=1) + "\n")
    return manifest


def cmd_al_run(args) -> int:
    if args.dump_config:
        print(_dumps(DESK_CONFIG, indent=2))
        return EXIT_OK
    if not args.config:
        raise UsageError("al-run needs a config file (or --dump-config)")
    cfg = load_config(args.config)
    if args.out:
        cfg["output_dir"] = args.out
    if args.threads:
        cfg["threads"] = args.threads
    out = Path(cfg["output_dir"])
    t0 = time.perf_counter()
    manifest = run_al(cfg, out, cfg["threads"], args.force)
    print(f"run {manifest['run_id']}: {len(manifest['files'])} logs in {out} "
          f"({time.perf_counter() - t0:.1f} s)")
    return EXIT_OK


# ------------------------------------------------------------ report/stats

def cmd_report(args) -> int:
    records = load_logs(args.logs)
    paths = write_report(records, args.out, args.pairing, args.alpha)
    from .report import table_rows
    print(format_table(table_rows(records, args.pairing, args.alpha)))
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


def _read_numbers(path) -> np.ndarray:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"{path}: {exc.strerror}") from None
    try:
        values = json.loads(text)
    except json.JSONDecodeError:
        values = text.split()
    try:
        return np.asarray(values, dtype=np.float64).ravel()
    except ValueError:
        raise UsageError(f"{path}: expected a list of numbers") from None


def cmd_stats(args) -> int:
    if args.a and args.b:
        a, b = _read_numbers(args.a), _read_numbers(args.b)
        context = {}
    elif args.logs and args.compare:
        records = load_logs(args.logs)
        sa, sb = args.compare
        count = args.labeled_count
        if count is None:
            count = max(r["labeled_count"] for r in records if r["strategy"] == sa)
        a, b = paired_values(records, sa, sb, count, args.metric, args.pairing)
        context = {"compare": [sa, sb], "labeled_count": count, "metric": args.metric,
                   "pairing": args.pairing}
    else:
        raise UsageError("stats needs either --a/--b value files or --logs with --compare A B")
    try:
        res = wilcoxon_signed_rank(a, b)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(_dumps({**context, "statistic": res.statistic, "p_value": res.p_value,
                  "n": res.n, "method": res.method}))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help=f"worker threads (default ${ENV_THREADS} or 1)")
    p.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                   help="overwrite existing outputs")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="alflow", parents=[common],
                                     description="Active learning for flow surrogates on vessel point clouds.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate synthetic bifurcations (ALFD)")
    p.add_argument("--n", type=int, required=True, help="number of shapes")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ranges", help="JSON file with parameter ranges")
    p.add_argument("--n-interior", type=int, default=2048)
    p.add_argument("--n-wall", type=int, default=1024)
    p.add_argument("--n-cap", type=int, default=64)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("label", parents=[common], help="label every ALFD file with the analytic oracle")
    p.add_argument("dataset", help="directory of ALFD files")
    p.add_argument("--inflow", type=float, default=0.1, help="parent mean speed, m/s (default 0.1)")
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--density", type=float, default=1060.0)
    p.add_argument("--viscosity", type=float, default=3.5e-3)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", parents=[common], help="train a surrogate on labeled shapes")
    p.add_argument("dataset", help="directory of ALFD + ALFV files")
    p.add_argument("--out", required=True, help="output ALFM file")
    p.add_argument("--config", help="JSON with optional 'model' and 'train' sections")
    p.add_argument("--ids", help="comma-separated shape ids (default: all labeled)")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict velocity fields (ALFV)")
    p.add_argument("shapes", nargs="+", help="ALFD files or directories")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("al-run", parents=[common], help="run the active-learning experiment")
    p.add_argument("config", nargs="?", help="JSON run config")
    p.add_argument("--out", help="output directory (overrides config and environment)")
    p.add_argument("--dump-config", action="store_true", help="print the desk-scale config and exit")
    p.set_defaults(func=cmd_al_run)

    p = sub.add_parser("report", parents=[common], help="aggregate run logs")
    p.add_argument("logs", nargs="+", help="ND-JSON logs or directories of logs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--pairing", choices=PAIRINGS, default="sample")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("stats", parents=[common], help="paired Wilcoxon signed-rank test")
    p.add_argument("--a", help="file with the first paired sample")
    p.add_argument("--b", help="file with the second paired sample")
    p.add_argument("--logs", nargs="+", help="run logs to draw paired samples from")
    p.add_argument("--compare", nargs=2, metavar=("A", "B"), help="two strategies")
    p.add_argument("--labeled-count", type=int, help="default: the final round")
    p.add_argument("--metric", default="approx_disp")
    p.add_argument("--pairing", choices=PAIRINGS, default="sample")
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    for name, default in (("seed", 0), ("threads", None), ("force", False), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc.path}: {str(exc).split(': ', 1)[-1]}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, ReportError, formats.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, OracleError, GeometryError, OSError, ValueError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
