"""Command-line entry point.

Four bounded commands — generate the training dataset, train the detector,
evaluate a trained model, run an attack scenario — each reproducible from
(config, seed) and each leaving a manifest beside its outputs listing what
was produced and under which configuration hash.

Exit codes: 0 success, 2 configuration errors, 3 data errors (unreadable or
corrupt files), 4 runtime failures (e.g. diverged training).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .dms import GruDetector
from .errors import ConfigError, DataError, RuntimeFailure
from .gru import kernels
from .gru.dataset import (Dataset, MODE_GRID, MODE_ISLANDED,
                          SweepSpec, generate_dataset)
from .gru.model import forward_batch
from .gru.params import VARIANTS, load_params, save_params
from .gru.train import TrainConfig, train
from .plant import PlantConfig
from .scenario import load_scenario, resolve_out_dir, run_scenario

OUT_DIR_ENV = "MGSHIELD_OUT_DIR"


def _config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_manifest(path: Path, command: str, config_doc: dict, seed,
                    outputs: list, started: float) -> None:
    manifest = {
        "command": command,
        "config_sha256": _config_hash(config_doc),
        "seed": seed,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "mgshield": __version__,
            "kernels": kernels.BACKEND,
        },
        "outputs": sorted(str(p) for p in outputs),
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


def _load_yaml_doc(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if doc is None:
        return {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path} must hold a mapping at top level")
    return doc


def _dataset_config(path) -> tuple:
    doc = _load_yaml_doc(path) if path else {}
    unknown = set(doc) - {"plant", "sweep"}
    if unknown:
        raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
    try:
        plant = PlantConfig(**(doc.get("plant") or {}))
        sweep_doc = dict(doc.get("sweep") or {})
        for key in ("grid_pv_w", "grid_bess_w", "islanded_pv_w"):
            if key in sweep_doc:
                sweep_doc[key] = tuple(float(v) for v in sweep_doc[key])
        sweep = SweepSpec(**sweep_doc)
    except TypeError as exc:
        raise ConfigError(f"bad dataset config: {exc}") from exc
    return plant, sweep


def cmd_gen_dataset(args) -> int:
    started = time.time()
    plant, sweep = _dataset_config(args.config)
    ds = generate_dataset(plant, sweep, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ds.save_csv(out)
    n_grid = sum(1 for c in ds.cases if c.mode == MODE_GRID)
    n_isl = sum(1 for c in ds.cases if c.mode == MODE_ISLANDED)
    print(f"{len(ds)} cases ({n_grid} grid, {n_isl} islanded)")
    config_doc = {"plant": dataclasses.asdict(plant),
                  "sweep": dataclasses.asdict(sweep), "seed": args.seed}
    manifest = out.with_suffix(out.suffix + ".manifest.json")
    _write_manifest(manifest, "gen-dataset", config_doc, args.seed,
                    [out], started)
    return 0


def cmd_train(args) -> int:
    started = time.time()
    ds = Dataset.load_csv(args.dataset)
    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, variant=args.variant)
    result = train(ds, cfg)
    out_model = Path(args.out_model)
    out_model.parent.mkdir(parents=True, exist_ok=True)
    save_params(result.params, result.stats, out_model)
    metrics = out_model.with_suffix(out_model.suffix + ".metrics.csv")
    with open(metrics, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_acc", "test_acc"])
        for row in result.log:
            w.writerow([row.epoch, repr(row.loss), repr(row.train_acc),
                        repr(row.test_acc)])
    print(f"variant {cfg.variant}: final train accuracy {result.final_train_acc:.4f}, "
          f"test accuracy {result.final_test_acc:.4f} "
          f"({len(result.train_case_ids)} train / {len(result.test_case_ids)} test cases)")
    manifest = out_model.with_suffix(out_model.suffix + ".manifest.json")
    _write_manifest(manifest, "train", dataclasses.asdict(cfg), args.seed,
                    [out_model, metrics], started)
    return 0


def cmd_eval(args) -> int:
    started = time.time()
    params, stats = load_params(args.model)
    ds = Dataset.load_csv(args.dataset)
    if not ds.cases:
        raise DataError(f"dataset {args.dataset} holds no cases")
    # fail on channel mismatch before any inference
    GruDetector(params, stats, seq_len=ds.cases[0].windows.shape[1])

    confusion = np.zeros((2, 2), dtype=int)  # [actual][predicted]
    case_rows = []
    for case in ds.cases:
        probs = forward_batch(stats.apply(case.windows), params)
        preds = (probs >= 0.5).astype(int)
        errors = int(np.sum(preds != case.label))
        confusion[case.label, 0] += int(np.sum(preds == 0))
        confusion[case.label, 1] += int(np.sum(preds == 1))
        case_rows.append((case.case_id, case.mode, len(preds), errors))

    total = int(confusion.sum())
    correct = int(confusion[0, 0] + confusion[1, 1])
    accuracy = correct / total
    out_errors = Path(args.out_errors) if args.out_errors else (
        Path(os.environ.get(OUT_DIR_ENV, ".")) / "eval_errors.csv")
    out_errors.parent.mkdir(parents=True, exist_ok=True)
    with open(out_errors, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "mode", "windows", "errors"])
        w.writerows(case_rows)

    print(f"accuracy {accuracy:.4f} over {total} windows")
    print("confusion matrix (rows actual grid/islanded, cols predicted):")
    print(f"  grid      {confusion[0, 0]:6d} {confusion[0, 1]:6d}")
    print(f"  islanded  {confusion[1, 0]:6d} {confusion[1, 1]:6d}")
    config_doc = {"model": str(args.model), "dataset": str(args.dataset)}
    manifest = out_errors.with_suffix(out_errors.suffix + ".manifest.json")
    _write_manifest(manifest, "eval", config_doc, None, [out_errors], started)
    return 0


def cmd_run(args) -> int:
    started = time.time()
    cfg = load_scenario(args.scenario)
    cfg.mitigation_enabled = args.mitigation == "on"
    if args.model is not None:
        cfg.model_path = args.model
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.transport = args.transport
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    cfg.out_dir = str(resolve_out_dir(cfg))

    report = run_scenario(cfg)
    print(json.dumps(report.to_dict(), indent=2))

    config_doc = dataclasses.asdict(cfg)
    config_doc["initial_breaker"] = int(cfg.initial_breaker)
    config_doc["attack"]["mode"] = cfg.attack.mode
    if cfg.attack.forced_value is not None:
        config_doc["attack"]["forced_value"] = int(cfg.attack.forced_value)
    _write_manifest(Path(cfg.out_dir) / "manifest.json", "run", config_doc,
                    cfg.seed, list(report.outputs.values()), started)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mgshield",
        description="Microgrid FDI testbed: dataset generation, detector "
                    "training and evaluation, attack scenario runs.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="generate the breaker-status training dataset")
    p.add_argument("--config", help="YAML with plant/sweep overrides")
    p.add_argument("--out", required=True, help="output dataset CSV")
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("train", help="train the breaker-status detector")
    p.add_argument("--dataset", required=True, help="dataset CSV from gen-dataset")
    p.add_argument("--out-model", required=True, help="output weight file (JSON)")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--variant", choices=list(VARIANTS), default="standard")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-errors", help="per-case error CSV (default eval_errors.csv)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="run an attack scenario end to end")
    p.add_argument("--scenario", required=True,
                   help="preset name (scenario_a, scenario_b) or YAML path")
    p.add_argument("--mitigation", choices=["on", "off"], required=True)
    p.add_argument("--model", help="trained weight file (needed with --mitigation on)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", help=f"output directory (default runs/<name>, "
                                     f"or ${OUT_DIR_ENV}/<name>)")
    p.add_argument("--transport", choices=["memory", "tcp"], default="memory")
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except RuntimeFailure as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
