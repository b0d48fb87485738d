"""Command-line entry point: ``sslkd run|resume|report|gen-data|eval``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import load_config, resolve_run_dir
from .dataspace import generate_dataset, load_dataset, save_dataset, split_dataset, write_split
from .errors import ConfigError
from .evalsuite import evaluate
from .modelzoo import load_checkpoint
from .pipeline import RunManifest, emit_report, resume_experiment, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("sslkd")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    resume = False if args.no_resume else None
    manifest = run_experiment(cfg, run_dir=args.run_dir, resume=resume)
    run_dir = Path(args.run_dir) if args.run_dir else resolve_run_dir(cfg)
    print((run_dir / "report.md").read_text())
    print(f"run directory: {run_dir} (config {manifest.config_hash[:12]})")
    return EXIT_OK


def cmd_resume(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "config.yaml").exists():
        raise ConfigError(f"{run_dir} is not a run directory (no config.yaml)")
    resume_experiment(run_dir)
    print((run_dir / "report.md").read_text())
    return EXIT_OK


def cmd_report(args) -> int:
    manifest = RunManifest.read(args.run_dir)
    out = Path(args.out) if args.out else Path(args.run_dir) / "report.md"
    emit_report(manifest, out)
    print(out.read_text())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    if cfg.dataset.source != "synthetic":
        raise ConfigError("gen-data needs dataset.source = synthetic")
    ds = cfg.dataset
    out = Path(args.out) if args.out else resolve_run_dir(cfg) / "data"
    samples = generate_dataset(ds.scene, ds.n_samples, ds.seed)
    save_dataset(samples, out)
    split = split_dataset(samples, ds.n_labelled, ds.unlabelled_ratio, ds.n_val, ds.seed)
    write_split(split, out / "split.csv")
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    samples = [s for s in load_dataset(args.dataset) if s.mask is not None]
    report = evaluate(model, samples, ignore_index=args.ignore_index, model_id=Path(args.checkpoint).stem)
    print(json.dumps(report.model_dump(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sslkd", description="Semi-supervised knowledge distillation runner")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run (or resume) an experiment from a YAML config")
    p.add_argument("config")
    p.add_argument("--run-dir", default=None, help="override output.run_dir")
    p.add_argument("--no-resume", action="store_true", help="retrain every stage")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run directory")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("report", help="re-emit the comparison table of a run")
    p.add_argument("run_dir")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("gen-data", help="write the synthetic dataset of a config as PNGs")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("eval", help="evaluate a checkpoint on an images/ + masks/ directory")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--ignore-index", type=int, default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit code 3
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
