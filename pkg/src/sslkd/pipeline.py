"""Two-step experiment orchestration with resumable, hash-checked stages.

Stage order: data preparation, supervised teachers, cross-model teacher
training, student distillation, then the enabled student baselines. Every
stage writes its checkpoints and TrainLog, then the manifest is rewritten,
so an interrupted run resumes from the last completed stage.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import Sequence

import torch
from pydantic import BaseModel

from . import __version__
from .config import ExperimentConfig, load_config, resolve_run_dir
from .dataspace import Sample, generate_dataset, load_dataset, materialize, split_dataset, write_split
from .errors import CheckpointError, ConfigError, SSLKDError
from .evalsuite import MetricsReport, best_rows, evaluate, format_table
from .modelzoo import SegModel, build_model, content_hash, load_checkpoint, save_checkpoint
from .trainers import (
    TrainLog,
    select_better,
    train_cms_baseline,
    train_cps_baseline,
    train_cross_model,
    train_student_sslkd,
    train_supervised,
)

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
STAGE_ORDER = (
    "data",
    "teacher1_supervised",
    "teacher2_supervised",
    "cross_model",
    "sslkd",
    "student_supervised",
    "cms",
    "cps",
)
# report rows in comparison-table order: row name -> (stage, checkpoint key)
REPORT_ROWS = {
    "Teacher#1": ("teacher1_supervised", "teacher1"),
    "Teacher#2": ("teacher2_supervised", "teacher2"),
    "Student(sup)": ("student_supervised", "student"),
    "Teacher#1+CMS": ("cross_model", "teacher1"),
    "Teacher#2+CMS": ("cross_model", "teacher2"),
    "Student(CMS)": ("cms", "student"),
    "Student(CPS)": ("cps", "best"),
    "Student(SSLKD)": ("sslkd", "student"),
}


class CheckpointRecord(BaseModel):
    path: str
    hash: str


class StageRecord(BaseModel):
    name: str
    checkpoints: dict[str, CheckpointRecord] = {}
    log: str | None = None
    seed: int | None = None
    started: float
    finished: float
    wall_clock: float
    extra: dict = {}


class RunManifest(BaseModel):
    config_hash: str
    version: str
    seeds: dict[str, int] = {}
    stages: list[StageRecord] = []
    reports: dict[str, MetricsReport] = {}
    completed: bool = False
    failed_stage: str | None = None
    error: str | None = None

    def stage(self, name: str) -> StageRecord | None:
        return next((s for s in self.stages if s.name == name), None)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / MANIFEST_NAME
        tmp = path.with_suffix(".tmp")
        tmp.write_text(self.model_dump_json(indent=2))
        tmp.replace(path)
        return path

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        if not path.exists():
            raise ConfigError(f"no {MANIFEST_NAME} in {run_dir}")
        return cls.model_validate_json(path.read_text())


def framework_version() -> str:
    return f"sslkd {__version__} (torch {torch.__version__})"


def enabled_stages(cfg: ExperimentConfig) -> list[str]:
    toggles = {
        "student_supervised": cfg.baselines.supervised,
        "cms": cfg.baselines.cms,
        "cps": cfg.baselines.cps,
    }
    return [s for s in STAGE_ORDER if toggles.get(s, True)]


def prepare_samples(cfg: ExperimentConfig) -> list[Sample]:
    ds = cfg.dataset
    if ds.source == "synthetic":
        return generate_dataset(ds.scene, ds.n_samples, ds.seed)
    return load_dataset(ds.root)


class Experiment:
    """One run directory: builds, trains, checkpoints and evaluates every model."""

    def __init__(self, cfg: ExperimentConfig, run_dir: str | Path | None = None, resume: bool | None = None):
        self.cfg = cfg
        self.run_dir = Path(run_dir) if run_dir is not None else resolve_run_dir(cfg)
        self.resume = cfg.output.resume if resume is None else resume
        self.dtype = getattr(torch, cfg.dtype)
        self.models: dict[tuple[str, str], SegModel] = {}
        self.partitions: dict[str, list[Sample]] = {}
        self.previous: RunManifest | None = None

    # -------------------------------------------------------------- helpers

    def _ckpt_path(self, stage: str, key: str) -> Path:
        return self.run_dir / "checkpoints" / f"{stage}__{key}.pt"

    def _build(self, role: str, spec_role: str | None = None) -> SegModel:
        spec = getattr(self.cfg.models, spec_role or role)
        return build_model(spec, self.cfg.init_seed(role), dtype=self.dtype)

    def _clone(self, stage: str, key: str) -> SegModel:
        src = self.models[(stage, key)]
        model = build_model(src.spec, 0, dtype=self.dtype)
        model.load_state_dict(src.state_dict())
        return model

    def _frozen(self, stage: str, key: str) -> SegModel:
        return self._clone(stage, key).eval()

    def _validate_resume(self):
        path = self.run_dir / MANIFEST_NAME
        if not self.resume or not path.exists():
            return
        prev = RunManifest.read(self.run_dir)
        if prev.config_hash != self.cfg.config_hash():
            raise ConfigError(
                f"{self.run_dir} was produced by a different config "
                f"(recorded {prev.config_hash[:12]}, current {self.cfg.config_hash()[:12]}); "
                "use a fresh run directory or disable resume"
            )
        # verify every recorded checkpoint before anything in the run directory is rewritten
        for rec in prev.stages:
            for ck in rec.checkpoints.values():
                self._load_verified(rec.name, ck)
        self.previous = prev

    def _load_verified(self, stage: str, ck: CheckpointRecord) -> SegModel:
        path = self.run_dir / ck.path
        try:
            model = load_checkpoint(path)
        except CheckpointError as exc:
            raise CheckpointError(f"refusing to resume stage {stage!r}: {exc}") from None
        if content_hash(model) != ck.hash:
            raise CheckpointError(
                f"refusing to resume stage {stage!r}: {path} does not match the hash recorded in the manifest"
            )
        return model

    def _try_restore(self, stage: str) -> StageRecord | None:
        rec = self.previous.stage(stage) if self.previous else None
        if rec is None:
            return None
        for key, ck in rec.checkpoints.items():
            self.models[(stage, key)] = self._load_verified(stage, ck)
        log.info("resumed stage %s from checkpoints", stage)
        return rec

    def _record(self, stage, started, models: dict[str, SegModel], train_log: TrainLog | None, seed, extra=None):
        checkpoints = {}
        for key, model in models.items():
            path = self._ckpt_path(stage, key)
            digest = save_checkpoint(model, path, extra={"stage": stage})
            checkpoints[key] = CheckpointRecord(path=str(path.relative_to(self.run_dir)), hash=digest)
            self.models[(stage, key)] = model
        log_path = None
        if train_log is not None:
            log_file = self.run_dir / "logs" / f"{stage}.ndjson"
            train_log.to_ndjson(log_file)
            log_path = str(log_file.relative_to(self.run_dir))
        finished = time.time()
        return StageRecord(
            name=stage,
            checkpoints=checkpoints,
            log=log_path,
            seed=seed,
            started=started,
            finished=finished,
            wall_clock=finished - started,
            extra=extra or {},
        )

    # -------------------------------------------------------------- stages

    def _stage_data(self, started):
        samples = prepare_samples(self.cfg)
        ds = self.cfg.dataset
        split = split_dataset(samples, ds.n_labelled, ds.unlabelled_ratio, ds.n_val, ds.seed)
        self.partitions = materialize(split, samples)
        split_file = write_split(split, self.run_dir / "split.csv")
        sizes = {k: len(v) for k, v in self.partitions.items()}
        rec = self._record("data", started, {}, None, ds.seed, extra={"split": split_file.name, "sizes": sizes})
        return rec

    def _stage_teacher_supervised(self, stage, role, started):
        cfg = self.cfg.stage_config(stage)
        model, tlog = train_supervised(
            self._build(role), self.partitions["labelled"], cfg, stage=stage, **self._extras(stage)
        )
        return self._record(stage, started, {role: model}, tlog, cfg.seed)

    def _extras(self, stage):
        if not self.cfg.output.eval_every:
            return {}
        return {"validation": self.partitions["validation"], "checkpoint_dir": self.run_dir / "checkpoints" / "periodic"}

    def _stage_cross_model(self, started):
        cfg = self.cfg.stage_config("cross_model")
        t1 = self._clone("teacher1_supervised", "teacher1")
        t2 = self._clone("teacher2_supervised", "teacher2")
        t1, t2, tlog = train_cross_model(
            t1, t2, self.partitions["labelled"], self.partitions["unlabelled"], cfg, **self._extras("cross_model")
        )
        return self._record("cross_model", started, {"teacher1": t1, "teacher2": t2}, tlog, cfg.seed)

    def _stage_sslkd(self, started):
        cfg = self.cfg.stage_config("sslkd")
        student, tlog = train_student_sslkd(
            self._build("student"),
            self._frozen("cross_model", "teacher1"),
            self._frozen("cross_model", "teacher2"),
            self.partitions["labelled"],
            self.partitions["unlabelled"],
            cfg,
            **self._extras("sslkd"),
        )
        return self._record("sslkd", started, {"student": student}, tlog, cfg.seed)

    def _stage_student_supervised(self, started):
        cfg = self.cfg.stage_config("student_supervised")
        student, tlog = train_supervised(
            self._build("student"), self.partitions["labelled"], cfg, stage="student_supervised",
            **self._extras("student_supervised"),
        )
        return self._record("student_supervised", started, {"student": student}, tlog, cfg.seed)

    def _stage_cms(self, started):
        cfg = self.cfg.stage_config("cms")
        student, tlog = train_cms_baseline(
            self._build("student"),
            self._frozen("cross_model", "teacher2"),
            self.partitions["labelled"],
            self.partitions["unlabelled"],
            cfg,
            **self._extras("cms"),
        )
        return self._record("cms", started, {"student": student}, tlog, cfg.seed)

    def _stage_cps(self, started):
        cfg = self.cfg.stage_config("cps")
        a, b, tlog = train_cps_baseline(
            self._build("student"),
            self._build("cps_partner", "student"),
            self.partitions["labelled"],
            self.partitions["unlabelled"],
            cfg,
            **self._extras("cps"),
        )
        best, which = select_better(a, b, self.partitions["validation"])
        return self._record("cps", started, {"a": a, "b": b, "best": best}, tlog, cfg.seed, extra={"best": which})

    def _run_stage(self, stage: str, started: float) -> StageRecord:
        if stage == "data":
            return self._stage_data(started)
        if stage == "teacher1_supervised":
            return self._stage_teacher_supervised(stage, "teacher1", started)
        if stage == "teacher2_supervised":
            return self._stage_teacher_supervised(stage, "teacher2", started)
        return getattr(self, f"_stage_{stage}")(started)

    # -------------------------------------------------------------- driver

    def run(self) -> RunManifest:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self._validate_resume()
        (self.run_dir / "config.yaml").write_text(self.cfg.to_yaml())
        manifest = RunManifest(
            config_hash=self.cfg.config_hash(),
            version=framework_version(),
            seeds=self.seed_table(),
        )
        manifest.write(self.run_dir)
        current = None
        try:
            for stage in enabled_stages(self.cfg):
                current = stage
                started = time.time()
                rec = self._try_restore(stage) if stage != "data" else None
                if rec is None:
                    if stage == "data" and self.previous and self.previous.stage("data"):
                        # data is regenerated deterministically; keep the original timestamps
                        self._stage_data(started)
                        rec = self.previous.stage("data")
                    else:
                        log.info("running stage %s", stage)
                        rec = self._run_stage(stage, started)
                manifest.stages.append(rec)
                manifest.write(self.run_dir)
            current = "evaluate"
            manifest.reports = self.evaluate_all()
            manifest.completed = True
            manifest.write(self.run_dir)
        except Exception as exc:
            manifest.failed_stage = current
            manifest.error = f"{type(exc).__name__}: {exc}"
            manifest.write(self.run_dir)
            raise
        emit_report(manifest, self.run_dir / "report.md")
        return manifest

    def evaluate_all(self) -> dict[str, MetricsReport]:
        val = self.partitions["validation"]
        reports = {}
        for row, (stage, key) in REPORT_ROWS.items():
            model = self.models.get((stage, key))
            if model is not None:
                reports[row] = evaluate(model, val, model_id=row)
        return reports

    def seed_table(self) -> dict[str, int]:
        from .config import INIT_SEED_OFFSETS

        seeds = {"run": self.cfg.seed, "data": self.cfg.dataset.seed}
        seeds.update({f"init:{k}": self.cfg.init_seed(k) for k in INIT_SEED_OFFSETS})
        seeds.update({f"stage:{s}": self.cfg.stage_config(s).seed for s in STAGE_ORDER if s != "data"})
        return seeds

    def model(self, row: str) -> SegModel:
        return self.models[REPORT_ROWS[row]]


def run_experiment(config: str | Path | ExperimentConfig, run_dir=None, resume: bool | None = None) -> RunManifest:
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    return Experiment(cfg, run_dir=run_dir, resume=resume).run()


def resume_experiment(run_dir: str | Path) -> RunManifest:
    run_dir = Path(run_dir)
    cfg = load_config(run_dir / "config.yaml")
    return Experiment(cfg, run_dir=run_dir, resume=True).run()


def load_run_model(run_dir: str | Path, row: str) -> SegModel:
    """Load the checkpoint behind a report row of a completed run."""
    manifest = RunManifest.read(run_dir)
    stage, key = REPORT_ROWS[row]
    rec = manifest.stage(stage)
    if rec is None or key not in rec.checkpoints:
        raise ConfigError(f"run {run_dir} has no model for row {row!r}")
    return load_checkpoint(Path(run_dir) / rec.checkpoints[key].path)


def verify_manifest(run_dir: str | Path) -> list[str]:
    """Return a list of integrity problems (empty when every checkpoint verifies)."""
    run_dir = Path(run_dir)
    manifest = RunManifest.read(run_dir)
    problems = []
    for rec in manifest.stages:
        for key, ck in rec.checkpoints.items():
            try:
                if content_hash(load_checkpoint(run_dir / ck.path)) != ck.hash:
                    problems.append(f"{rec.name}/{key}: hash mismatch")
            except SSLKDError as exc:
                problems.append(f"{rec.name}/{key}: {exc}")
    return problems


# ---------------------------------------------------------------- reports


def report_rows(manifest: RunManifest) -> list[tuple[str, MetricsReport]]:
    ordered = [r for r in REPORT_ROWS if r in manifest.reports]
    ordered += [r for r in manifest.reports if r not in REPORT_ROWS]
    return [(r, manifest.reports[r]) for r in ordered]


def emit_report(manifest: RunManifest, out_path: str | Path) -> Path:
    """Write the markdown comparison table to ``out_path`` and JSON records beside it."""
    if not manifest.reports:
        raise ConfigError("manifest holds no metrics reports")
    out_path = Path(out_path)
    rows = report_rows(manifest)
    out_path.write_text(format_table(rows))
    best = best_rows([r for _, r in rows])
    records = []
    for i, (name, rep) in enumerate(rows):
        records.append(
            {
                "model": name,
                "metrics": {k: getattr(rep, k) for k in ("iou", "oa", "precision", "recall", "f1")},
                "gflops": rep.gflops,
                "confusion": {k: getattr(rep, k) for k in ("tp", "fp", "fn", "tn")},
                "undefined": rep.undefined,
                "averaging": rep.averaging,
                "best": sorted(c for c, idx in best.items() if i in idx),
                "config_hash": manifest.config_hash,
                "seed": manifest.seeds.get("run"),
            }
        )
    out_path.with_suffix(".json").write_text(json.dumps(records, indent=2))
    return out_path


def median_iou(manifests: Sequence[RunManifest]) -> dict[str, float]:
    """Per-row median IoU across runs (e.g. several seeds)."""
    import statistics

    rows = {r for m in manifests for r in m.reports}
    return {r: statistics.median(m.reports[r].iou for m in manifests if r in m.reports) for r in rows}
