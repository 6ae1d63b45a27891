"""``dcdg`` command line: generate-data, train, evaluate, ablate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training abort,
5 I/O error. Flags override config-file fields, which override defaults.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import subprocess
import sys
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .data import CENTERS, CenterSpec, Dataset, default_center_specs, generate_center, load_dataset, save_dataset
from .diagnostics import AdaptationHistory
from .errors import ArtifactIOError, ConfigError, DataError, DCDGError
from .metrics import MetricsReport, evaluate_model, evaluate_predictions
from .training import LOG_COLUMNS, MODES, EpochLog, TrainingConfig, run_training

log = logging.getLogger("dcdg")

# config-file keys that describe the protocol rather than the optimizer
PROTOCOL_KEYS = ("mode", "n_train", "n_val", "n_test")
PROTOCOL_DEFAULTS = {"mode": "single-center", "n_train": 100, "n_val": 10, "n_test": 20}


def _num_workers() -> int:
    raw = os.environ.get("DCDG_NUM_WORKERS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DCDG_NUM_WORKERS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"DCDG_NUM_WORKERS must be >= 1, got {n}")
    return n


def _read_json(path, what: str):
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"missing {what}: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def _write_json(path: Path, obj) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# -- generate-data ----------------------------------------------------------

def _parse_specs(obj, seed: int) -> dict[str, CenterSpec]:
    if obj is None:
        return default_center_specs(seed)
    if not isinstance(obj, dict):
        raise ConfigError("center spec file must hold a JSON object")
    items = obj.get("centers", obj)
    if isinstance(items, dict):
        items = [dict(v, center_id=k) for k, v in items.items()]
    specs = {}
    for d in items:
        spec = CenterSpec.from_dict(d)
        specs[spec.center_id] = spec
    return specs


def cmd_generate_data(args) -> int:
    raw = _read_json(args.spec, "center spec") if args.spec else None
    specs = _parse_specs(raw, args.seed)
    out = Path(args.out)
    for cid, spec in specs.items():
        path = save_dataset(generate_center(spec), out / cid)
        print(f"{cid}: {spec.n_cases} cases -> {path}")
    _write_json(out / "centers.json", {"centers": [s.to_dict() for s in specs.values()]})
    return 0


# -- train ------------------------------------------------------------------

def _resolve_config(args) -> tuple[TrainingConfig, dict, bytes | None]:
    file_cfg, raw = {}, None
    if getattr(args, "config", None):
        path = Path(args.config)
        file_cfg = _read_json(path, "config")
        if not isinstance(file_cfg, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        raw = path.read_bytes()
    proto = {k: file_cfg.pop(k, PROTOCOL_DEFAULTS[k]) for k in PROTOCOL_KEYS}
    if getattr(args, "mode", None):
        proto["mode"] = args.mode
    if proto["mode"] not in benchmark.PROTOCOLS:
        raise ConfigError(f"mode must be one of {benchmark.PROTOCOLS}, got {proto['mode']!r}")
    if "labeled_ratio" not in file_cfg and proto["mode"] == "two-center":
        file_cfg["labeled_ratio"] = 1.0
    overrides = {
        "labeled_ratio": getattr(args, "labeled_ratio", None),
        "ablation_mode": getattr(args, "ablation", None),
        "seed": getattr(args, "seed", None),
        "epochs": getattr(args, "epochs", None),
        "batch_size": getattr(args, "batch_size", None),
    }
    merged = {**benchmark.benchmark_config(proto["mode"]).to_dict(), **file_cfg}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return TrainingConfig.from_dict(merged), proto, raw


def _load_centers(data_dir, proto: dict) -> dict[str, Dataset]:
    data_dir = Path(data_dir)
    workers = _num_workers()
    need = ("C1",) if proto["mode"] == "single-center" else CENTERS
    return {c: load_dataset(data_dir / c / "manifest.json", workers) for c in need}


def _protocol(centers: dict[str, Dataset], proto: dict, cfg: TrainingConfig) -> benchmark.Protocol:
    if proto["mode"] == "single-center":
        return benchmark.single_center(centers["C1"], cfg.labeled_ratio, cfg.seed, proto["n_val"], proto["n_test"])
    return benchmark.two_center(
        centers["C1"], centers["C2"], cfg.labeled_ratio, cfg.seed, proto["n_train"], proto["n_val"], proto["n_test"]
    )


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_epoch_csv(logs: list[EpochLog], path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for rec in logs:
                w.writerow([_fmt(rec.row()[k]) for k in LOG_COLUMNS])
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_epoch_csv(path) -> list[dict]:
    """Parse an epoch CSV; a malformed row raises DataError naming its line."""
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"missing epoch CSV: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != LOG_COLUMNS:
            raise DataError(f"{path}: line 1: expected header {','.join(LOG_COLUMNS)}")
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(LOG_COLUMNS):
                raise DataError(f"{path}: line {lineno}: expected {len(LOG_COLUMNS)} fields, got {len(rec)}")
            try:
                row = {k: float(v) for k, v in zip(LOG_COLUMNS, rec)}
                row["epoch"] = int(rec[0])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            rows.append(row)
    return rows


def cmd_train(args) -> int:
    cfg, proto, raw = _resolve_config(args)
    centers = _load_centers(args.data, proto)
    p = _protocol(centers, proto, cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create run dir {out}: {exc}") from exc
    log.info("train %s %s: %d labeled, %d unlabeled, %d val, %d test", proto["mode"], cfg.ablation_mode,
             len(p.labeled), len(p.unlabeled), len(p.val), len(p.test))
    res = run_training(cfg, p.labeled, p.unlabeled, p.val)

    ck = save_checkpoint(res.state, out / "checkpoint.bin", extra={"ablation_mode": cfg.ablation_mode})
    epochs = write_epoch_csv(res.logs, out / "epochs.csv")
    hist = out / "history.csv"
    AdaptationHistory.from_logs(res.logs).write_csv(hist)
    resolved = _write_json(out / "resolved_config.json", {**proto, **cfg.to_dict()})
    snapshot = out / "config.json"
    try:
        snapshot.write_bytes(raw if raw is not None else resolved.read_bytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {snapshot}: {exc}") from exc
    data_dir = Path(args.data).resolve()
    manifest = {
        "run_id": uuid.uuid4().hex,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "version": _version(),
        "config": snapshot.name,
        "resolved_config": resolved.name,
        "datasets": {c: str(data_dir / c / "manifest.json") for c in centers},
        "checkpoint": ck.name,
        "best_epoch": res.best_epoch,
        "reports": [epochs.name, hist.name],
    }
    _write_json(out / "run.json", manifest)
    print(f"best epoch {res.best_epoch}; run written to {out}")
    return 0


# -- evaluate ---------------------------------------------------------------

def _oracle(test: Dataset) -> np.ndarray:
    return np.stack([c.mask for c in test])


def _write_report(rep: MetricsReport, out: Path) -> None:
    try:
        out.mkdir(parents=True, exist_ok=True)
        rep.write_csv(out / "per_case.csv")
        rep.write_json(out / "summary.json")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write report to {out}: {exc}") from exc


def cmd_evaluate(args) -> int:
    if args.run:
        run = Path(args.run)
        manifest = _read_json(run / "run.json", "run manifest")
        resolved = _read_json(run / manifest["resolved_config"], "resolved config")
        proto = {k: resolved.pop(k) for k in PROTOCOL_KEYS}
        cfg = TrainingConfig.from_dict(resolved)
        workers = _num_workers()
        centers = {c: load_dataset(p, workers) for c, p in manifest["datasets"].items()}
        test = _protocol(centers, proto, cfg).test
        ck_path = run / manifest["checkpoint"]
    else:
        if not (args.checkpoint and args.test_manifest):
            raise ConfigError("evaluate needs --run or both --checkpoint and --test-manifest")
        test = load_dataset(args.test_manifest, _num_workers())
        ck_path = Path(args.checkpoint)
    if len(test) == 0:
        raise DataError("test set is empty")
    if not test.has_masks:
        raise DataError("test set needs ground-truth masks")
    if args.oracle_predictions:
        rep = evaluate_predictions(test, _oracle(test))
    else:
        rep = evaluate_model(load_checkpoint(ck_path), test)
    out = Path(args.out)
    _write_report(rep, out)
    s = rep.summary()
    print(f"dice {s['dice']['mean']:.4f} ± {s['dice']['std']:.4f}  iou {s['iou']['mean']:.4f}  "
          f"msd {s['msd']['mean']:.4f}  ({rep.n_cases} cases) -> {out}")
    return 0


# -- ablate -----------------------------------------------------------------

RESULT_COLUMNS = ("mode", "seed", "status", "dice_mean", "dice_std", "iou_mean", "iou_std",
                  "msd_mean", "msd_std", "best_epoch", "error")


def _ablation_job(job: dict) -> dict:
    """Run one (mode, seed); failures are returned, not raised."""
    cfg, proto, mode, seed = job["cfg"], job["proto"], job["mode"], job["seed"]
    row = {"mode": mode, "seed": seed}
    try:
        run_cfg = replace(cfg, ablation_mode=mode, seed=seed)
        if job["centers"] is None:
            p = benchmark.default_protocol(proto["mode"], seed, run_cfg.labeled_ratio)
        else:
            p = _protocol(job["centers"], proto, run_cfg)
        outcome = benchmark.run_protocol(p, run_cfg)
    except DCDGError as exc:
        return {**row, "status": "failed", "error": f"{type(exc).__name__}: {exc}"}
    return {**row, "status": "ok", "outcome": outcome}


def ablation_tables(results: list[dict]) -> tuple[list[dict], list[dict]]:
    """(per mode/seed summary rows, long-format per-case rows)."""
    summary, long_rows = [], []
    for r in results:
        row = {k: "" for k in RESULT_COLUMNS}
        row.update(mode=r["mode"], seed=r["seed"], status=r["status"], error=r.get("error", ""))
        if r["status"] == "ok":
            out = r["outcome"]
            s = out.report.summary()
            for m in ("dice", "iou", "msd"):
                row[f"{m}_mean"], row[f"{m}_std"] = s[m]["mean"], s[m]["std"]
            row["best_epoch"] = out.result.best_epoch
            for c in out.report.cases:
                for m in ("dice", "iou", "msd"):
                    v = getattr(c, m)
                    if v is not None:
                        long_rows.append({"mode": r["mode"], "seed": r["seed"], "case_id": c.case_id,
                                          "metric": m, "value": v})
        summary.append(row)
    return summary, long_rows


def write_ablation(results: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    summary, long_rows = ablation_tables(results)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        res_path, long_path = out_dir / "ablation_results.csv", out_dir / "ablation_long.csv"
        with open(res_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, RESULT_COLUMNS)
            w.writeheader()
            w.writerows({k: _fmt(v) for k, v in r.items()} for r in summary)
        with open(long_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, ("mode", "seed", "case_id", "metric", "value"))
            w.writeheader()
            w.writerows({k: _fmt(v) for k, v in r.items()} for r in long_rows)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write ablation tables to {out_dir}: {exc}") from exc
    return res_path, long_path


def read_long_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ArtifactIOError(f"missing ablation table: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, r in enumerate(reader, start=2):
            try:
                rows.append({"mode": r["mode"], "seed": int(r["seed"]), "case_id": r["case_id"],
                             "metric": r["metric"], "value": float(r["value"])})
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: line {lineno}: {exc!r}") from None
    return rows


def _parse_list(text: str, conv, what: str) -> list:
    try:
        return [conv(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list: {text!r}") from None


def cmd_ablate(args) -> int:
    cfg, proto, _ = _resolve_config(args)
    seeds = _parse_list(args.seeds, int, "seed")
    modes = _parse_list(args.modes, str, "mode")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError(f"unknown ablation mode(s) {bad}; choose from {MODES}")
    centers = _load_centers(args.data, proto) if args.data else None
    jobs = [{"cfg": cfg, "proto": proto, "mode": m, "seed": s, "centers": centers} for s in seeds for m in modes]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_ablation_job, jobs))
    else:
        results = [_ablation_job(j) for j in jobs]
    res_path, long_path = write_ablation(results, args.out)
    failed = [r for r in results if r["status"] != "ok"]
    for r in results:
        if r["status"] == "ok":
            print(f"{r['mode']:5s} seed {r['seed']}: dice {r['outcome'].dice:.4f}")
        else:
            print(f"{r['mode']:5s} seed {r['seed']}: FAILED {r['error']}")
    print(f"wrote {res_path} and {long_path}")
    return 4 if failed else 0


# -- report -----------------------------------------------------------------

def cmd_report(args) -> int:
    from . import plotting

    out = Path(args.out) if args.out else None
    written = []
    if args.run:
        run = Path(args.run)
        out = out or run
        rows = read_epoch_csv(run / "epochs.csv")
        if not rows:
            raise DataError(f"{run / 'epochs.csv'} has no epoch rows")
        written.append(plotting.plot_losses(rows, out / "losses.png"))
        hist = AdaptationHistory([(r["epoch"], r["MIL"], r["MIU"]) for r in rows
                                  if math.isfinite(r["MIL"]) and math.isfinite(r["MIU"])])
        if len(hist):
            written.append(plotting.plot_mil_miu(hist, out / "mil_miu.png"))
        else:
            print("note: run has no adaptation phase (MIL/MIU undefined); MIL/MIU plot omitted")
    if args.ablation:
        out = out or Path(args.ablation).parent
        written += plotting.plot_ablation(read_long_csv(args.ablation), out)
    if not written and not args.run:
        raise ConfigError("report needs --run and/or --ablation")
    for p in written:
        print(f"wrote {p}")
    return 0


# -- entry point ------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config (TrainingConfig fields plus mode/n_train/n_val/n_test)")
    p.add_argument("--mode", choices=benchmark.PROTOCOLS, help="protocol (default single-center)")
    p.add_argument("--labeled-ratio", type=float, help="fraction of training cases with visible masks")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcdg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic C1/C2 datasets with manifests")
    p.add_argument("--spec", help="JSON with a 'centers' list of center specs (default: built-in specs)")
    p.add_argument("--seed", type=int, default=0, help="seed for the built-in specs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train one model and write a run directory")
    _add_train_flags(p)
    p.add_argument("--ablation", choices=MODES, help="training mode (default DCDG)")
    p.add_argument("--data", required=True, help="directory produced by generate-data")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="per-case metrics and summary for a checkpoint")
    p.add_argument("--run", help="run directory from train (uses its test split)")
    p.add_argument("--checkpoint")
    p.add_argument("--test-manifest")
    p.add_argument("--oracle-predictions", action="store_true",
                   help="debug: score the ground-truth masks as predictions")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train every mode for every seed")
    _add_train_flags(p)
    p.add_argument("--data", help="directory produced by generate-data (default: fresh synthetic data per seed)")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--modes", default=",".join(MODES))
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures from a run and/or an ablation table")
    p.add_argument("--run", help="run directory with epochs.csv")
    p.add_argument("--ablation", help="long-format ablation CSV")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DCDGError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ArtifactIOError.exit_code


if __name__ == "__main__":
    sys.exit(main())
