"""Training stages: supervised, cross-model teacher supervision, student distillation, baselines.

Every stage runs SGD with momentum and weight decay under a polynomial
learning-rate schedule. Each iteration draws one labelled batch and, where
the stage uses unlabelled data, one unlabelled batch from an independent
stream; both streams are pure functions of ``cfg.seed``.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .dataspace import Sample
from .errors import ConfigError, TrainingError
from .evalsuite import evaluate
from .losses import (
    IGNORE_INDEX,
    LossParts,
    aggregate_teacher_probs,
    feature_mae,
    masked_labels,
    prob_mae,
    pseudo_labels,
    softmax_probs,
    supervised_ce,
    total_sslkd_loss,
)
from .modelzoo import SegModel, content_hash, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("stage", "iter", "lr", "l_sup", "l_dis_f", "l_dis_p", "l_unsup", "total")
LABELLED_STREAM, UNLABELLED_STREAM = 0, 1


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    base_lr: float = 0.01
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    max_iters: int = 500
    # None means 20% of max_iters
    distill_warmup_iters: int | None = None
    loss_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    seed: int = 0
    eval_every: int = 0
    supervised_in_cross_model: bool = True
    pseudo_threshold: float | None = None
    flip_augment: bool = False

    @field_validator("base_lr", "lr_power")
    @classmethod
    def _positive(cls, v):
        if v <= 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("momentum")
    @classmethod
    def _momentum(cls, v):
        if not 0 <= v < 1:
            raise ValueError("momentum must lie in [0, 1)")
        return v

    @field_validator("weight_decay", "max_iters", "eval_every")
    @classmethod
    def _non_negative(cls, v):
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("batch_size")
    @classmethod
    def _batch(cls, v):
        if v < 1:
            raise ValueError("batch_size must be >= 1")
        return v

    @field_validator("loss_weights")
    @classmethod
    def _weights(cls, v):
        if any(w < 0 for w in v):
            raise ValueError("loss weights must be >= 0")
        return v

    @field_validator("pseudo_threshold")
    @classmethod
    def _threshold(cls, v):
        if v is not None and not 0 <= v <= 1:
            raise ValueError("pseudo_threshold must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _warmup(self):
        if self.distill_warmup_iters is not None and not 0 <= self.distill_warmup_iters <= self.max_iters:
            raise ValueError("distill_warmup_iters must lie in [0, max_iters]")
        return self

    @property
    def warmup_iters(self) -> int:
        if self.distill_warmup_iters is None:
            return int(0.2 * self.max_iters)
        return self.distill_warmup_iters


@dataclasses.dataclass
class TrainLog:
    stage: str
    records: list[dict] = dataclasses.field(default_factory=list)
    evals: list[dict] = dataclasses.field(default_factory=list)
    wall_clock: float = 0.0
    meta: dict = dataclasses.field(default_factory=dict)

    def losses(self, field: str) -> np.ndarray:
        return np.array([r[field] for r in self.records], dtype=np.float64)

    def to_ndjson(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w") as fh:
            fh.write(json.dumps({"kind": "meta", "stage": self.stage, "wall_clock": self.wall_clock, **self.meta}) + "\n")
            for r in self.records:
                fh.write(json.dumps(r) + "\n")
            for e in self.evals:
                fh.write(json.dumps({"kind": "eval", **e}) + "\n")
        return path

    @classmethod
    def from_ndjson(cls, path: str | Path) -> "TrainLog":
        out = None
        for line in Path(path).read_text().splitlines():
            rec = json.loads(line)
            kind = rec.pop("kind", "iter")
            if kind == "meta":
                stage, wall = rec.pop("stage"), rec.pop("wall_clock")
                out = cls(stage=stage, wall_clock=wall, meta=rec)
            elif kind == "eval":
                out.evals.append(rec)
            else:
                out.records.append(rec)
        return out


def poly_lr(base_lr: float, iter: int, max_iters: int, power: float) -> float:
    """``base_lr * (1 - iter / max_iters) ** power``."""
    if max_iters <= 0:
        raise ValueError("max_iters must be positive")
    if not 0 <= iter <= max_iters:
        raise ValueError(f"iter {iter} outside [0, {max_iters}]")
    return base_lr * (1.0 - iter / max_iters) ** power


# ---------------------------------------------------------------- data feeding


class BatchCycler:
    """Endless mini-batches over a partition, reshuffled every epoch.

    The index sequence depends only on (len(samples), batch_size, seed, stream).
    """

    def __init__(self, samples: Sequence[Sample], batch_size: int, seed: int, stream: int, flip: bool = False):
        if not samples:
            raise ConfigError("cannot draw batches from an empty partition")
        self.images = torch.from_numpy(np.stack([s.image for s in samples]))
        self.masks = None
        if all(s.mask is not None for s in samples):
            self.masks = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
        self.batch_size = batch_size
        self.flip = flip
        self._rng = np.random.default_rng([seed, stream])
        self._order = np.empty(0, dtype=np.int64)

    def next(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor | None]:
        while len(self._order) < self.batch_size:
            self._order = np.concatenate([self._order, self._rng.permutation(len(self.images))])
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size :]
        idx = torch.from_numpy(idx)
        x = self.images[idx].to(dtype)
        y = self.masks[idx] if self.masks is not None else None
        if self.flip:
            if self._rng.random() < 0.5:
                x, y = x.flip(-1), (y.flip(-1) if y is not None else None)
            if self._rng.random() < 0.5:
                x, y = x.flip(-2), (y.flip(-2) if y is not None else None)
        return x, y


def _require_masks(samples: Sequence[Sample], what: str):
    if not samples:
        raise ConfigError(f"{what} partition is empty")
    if any(s.mask is None for s in samples):
        raise ConfigError(f"every {what} sample needs a mask")


def _dtype(model: SegModel) -> torch.dtype:
    return next(model.parameters()).dtype


def _sgd(models: Sequence[SegModel], cfg: TrainConfig) -> torch.optim.SGD:
    params = [p for m in models for p in m.parameters()]
    return torch.optim.SGD(params, lr=cfg.base_lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(opt: torch.optim.Optimizer, lr: float):
    for group in opt.param_groups:
        group["lr"] = lr


class _Run:
    """Shared per-stage bookkeeping: lr schedule, logging, periodic eval and checkpoints."""

    def __init__(self, stage, cfg, models: dict[str, SegModel], validation, checkpoint_dir):
        self.stage, self.cfg, self.models = stage, cfg, models
        self.validation = validation
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log = TrainLog(stage=stage, meta={"max_iters": cfg.max_iters, "seed": cfg.seed})
        self.opt = _sgd(list(models.values()), cfg)
        self._t0 = time.perf_counter()

    def lr(self, it: int) -> float:
        lr = poly_lr(self.cfg.base_lr, it, self.cfg.max_iters, self.cfg.lr_power)
        _set_lr(self.opt, lr)
        return lr

    def step(self, it: int, lr: float, total: torch.Tensor, fields: dict[str, float]):
        value = float(total.detach())
        if not np.isfinite(value):
            state = {
                "stage": self.stage,
                "iter": it,
                "lr": lr,
                **fields,
                "param_norms": {
                    k: float(torch.linalg.vector_norm(torch.cat([p.detach().flatten() for p in m.parameters()])))
                    for k, m in self.models.items()
                },
            }
            raise TrainingError(f"non-finite loss at {self.stage} iteration {it}: {json.dumps(state)}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        self.opt.step()
        rec = {"stage": self.stage, "iter": it, "lr": lr, "l_sup": 0.0, "l_dis_f": 0.0, "l_dis_p": 0.0, "l_unsup": 0.0}
        rec.update(fields)
        rec["total"] = value
        self.log.records.append(rec)
        self._maybe_eval(it)

    def _maybe_eval(self, it: int):
        every = self.cfg.eval_every
        if not every or (it + 1) % every:
            return
        for key, model in self.models.items():
            if self.validation:
                report = evaluate(model, self.validation, model_id=key)
                self.log.evals.append({"iter": it, "model": key, "report": report.model_dump()})
                model.train()
            if self.checkpoint_dir is not None:
                save_checkpoint(model, self.checkpoint_dir / f"{self.stage}__{key}__iter{it + 1:06d}.pt")

    def finish(self) -> TrainLog:
        self.log.wall_clock = time.perf_counter() - self._t0
        log.info("%s: %d iterations in %.1fs", self.stage, len(self.log.records), self.log.wall_clock)
        return self.log


def _ce_on_pseudo(probs, labels, valid) -> torch.Tensor:
    if not valid.any():
        return probs.sum() * 0.0
    return supervised_ce(probs, masked_labels(labels, valid), ignore_index=IGNORE_INDEX)


# ---------------------------------------------------------------- supervised


def train_supervised(
    model: SegModel,
    labelled: Sequence[Sample],
    cfg: TrainConfig,
    *,
    validation: Sequence[Sample] | None = None,
    checkpoint_dir: str | Path | None = None,
    stage: str = "supervised",
) -> tuple[SegModel, TrainLog]:
    """Plain cross-entropy training on the labelled partition."""
    _require_masks(labelled, "labelled")
    run = _Run(stage, cfg, {"model": model}, validation, checkpoint_dir)
    batches = BatchCycler(labelled, cfg.batch_size, cfg.seed, LABELLED_STREAM, cfg.flip_augment)
    model.train()
    for it in range(cfg.max_iters):
        lr = run.lr(it)
        x, y = batches.next(_dtype(model))
        _, logits = model(x)
        sup = supervised_ce(softmax_probs(logits), y)
        loss = cfg.loss_weights[0] * sup
        run.step(it, lr, loss, {"l_sup": float(sup.detach())})
    return model, run.finish()


# ---------------------------------------------------------------- mutual pseudo-supervision


def _mutual_training(stage, model_a, model_b, labelled, unlabelled, cfg, validation, checkpoint_dir, ids):
    _require_masks(labelled, "labelled")
    if not unlabelled:
        raise ConfigError("unlabelled partition is empty")
    models = dict(zip(ids, (model_a, model_b)))
    run = _Run(stage, cfg, models, validation, checkpoint_dir)
    lab = BatchCycler(labelled, cfg.batch_size, cfg.seed, LABELLED_STREAM, cfg.flip_augment)
    unl = BatchCycler(unlabelled, cfg.batch_size, cfg.seed, UNLABELLED_STREAM, cfg.flip_augment)
    w_sup, _, _, w_unsup = cfg.loss_weights
    dtype = _dtype(model_a)
    model_a.train()
    model_b.train()
    for it in range(cfg.max_iters):
        lr = run.lr(it)
        xu, _ = unl.next(dtype)
        probs = {k: softmax_probs(m(xu)[1]) for k, m in models.items()}
        labels = {k: pseudo_labels(p, cfg.pseudo_threshold) for k, p in probs.items()}
        fields: dict[str, float] = {}
        total = 0.0
        sup_sum = unsup_sum = 0.0
        for consumer, producer in ((ids[0], ids[1]), (ids[1], ids[0])):
            if consumer == producer:
                raise TrainingError(f"{stage}: {consumer} would be supervised by its own pseudo labels")
            unsup = _ce_on_pseudo(probs[consumer], *labels[producer])
            fields[f"l_unsup_{consumer}"] = float(unsup.detach())
            unsup_sum += fields[f"l_unsup_{consumer}"]
            total = total + w_unsup * unsup
        if cfg.supervised_in_cross_model:
            xl, yl = lab.next(dtype)
            for k, m in models.items():
                sup = supervised_ce(softmax_probs(m(xl)[1]), yl)
                fields[f"l_sup_{k}"] = float(sup.detach())
                sup_sum += fields[f"l_sup_{k}"]
                total = total + w_sup * sup
        fields.update(l_sup=sup_sum, l_unsup=unsup_sum)
        run.step(it, lr, total, fields)
    return run.finish()


def train_cross_model(
    teacher1: SegModel,
    teacher2: SegModel,
    labelled: Sequence[Sample],
    unlabelled: Sequence[Sample],
    cfg: TrainConfig,
    *,
    validation: Sequence[Sample] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[SegModel, SegModel, TrainLog]:
    """Each teacher learns from the other's pseudo labels on unlabelled batches, never its own."""
    log_ = _mutual_training(
        "cross_model", teacher1, teacher2, labelled, unlabelled, cfg, validation, checkpoint_dir, ("teacher1", "teacher2")
    )
    return teacher1, teacher2, log_


def train_cps_baseline(
    model_a: SegModel,
    model_b: SegModel,
    labelled: Sequence[Sample],
    unlabelled: Sequence[Sample],
    cfg: TrainConfig,
    *,
    validation: Sequence[Sample] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[SegModel, SegModel, TrainLog]:
    """Cross pseudo supervision between two same-architecture students."""
    if model_a.spec != model_b.spec:
        raise ConfigError("CPS needs two models with the same spec")
    if content_hash(model_a) == content_hash(model_b):
        warnings.warn("CPS models start identical; the perturbation is degenerate", RuntimeWarning, stacklevel=2)
    log_ = _mutual_training("cps", model_a, model_b, labelled, unlabelled, cfg, validation, checkpoint_dir, ("a", "b"))
    return model_a, model_b, log_


def select_better(
    model_a: SegModel, model_b: SegModel, validation: Sequence[Sample]
) -> tuple[SegModel, str]:
    """Return the model with higher validation IoU (``a`` on ties) and its key."""
    iou_a = evaluate(model_a, validation).iou
    iou_b = evaluate(model_b, validation).iou
    return (model_a, "a") if iou_a >= iou_b else (model_b, "b")


# ---------------------------------------------------------------- student distillation


def _check_frozen(teachers: dict[str, SegModel]):
    for name, t in teachers.items():
        if t.training:
            raise ConfigError(f"{name} must be in eval mode (frozen) during student training")


def distillation_parts(
    student: SegModel,
    x_lab: torch.Tensor,
    y_lab: torch.Tensor,
    x_unl: torch.Tensor | None,
    feature_teacher: SegModel | None,
    prob_teachers: Sequence[SegModel],
    weights: tuple[float, float, float, float],
    threshold: float | None = None,
) -> LossParts:
    """Loss components for one student step.

    ``x_unl=None`` yields the warm-up form (supervised term only). Terms
    whose weight is zero are not computed and stay at 0. Teacher outputs
    are produced under ``no_grad`` and additionally detached by the losses.
    """
    _, logits = student(x_lab)
    parts = LossParts(sup=supervised_ce(softmax_probs(logits), y_lab), weights=tuple(weights))
    if x_unl is None:
        return parts
    w_sup, w_f, w_p, w_u = weights
    need_probs = (w_p > 0 or w_u > 0) and prob_teachers
    with torch.no_grad():
        f_teacher = feature_teacher(x_unl)[0] if (w_f > 0 and feature_teacher is not None) else None
        p_agg = aggregate_teacher_probs(*(softmax_probs(t(x_unl)[1]) for t in prob_teachers)) if need_probs else None
    f_student, logits_u = student(x_unl)
    p_student = softmax_probs(logits_u)
    if f_teacher is not None:
        parts.dis_f = feature_mae(f_teacher, f_student)
    if p_agg is not None:
        if w_p > 0:
            parts.dis_p = prob_mae(p_agg, p_student)
        if w_u > 0:
            parts.unsup = _ce_on_pseudo(p_student, *pseudo_labels(p_agg, threshold))
    return parts


def _distill(
    stage: str,
    student: SegModel,
    feature_teacher: SegModel | None,
    prob_teachers: dict[str, SegModel],
    labelled,
    unlabelled,
    cfg: TrainConfig,
    weights,
    validation,
    checkpoint_dir,
) -> tuple[SegModel, TrainLog]:
    _require_masks(labelled, "labelled")
    frozen = dict(prob_teachers)
    if feature_teacher is not None:
        frozen["feature_teacher"] = feature_teacher
    _check_frozen(frozen)
    before = {k: content_hash(t) for k, t in frozen.items()}
    warmup = cfg.warmup_iters
    if warmup < cfg.max_iters and not unlabelled:
        raise ConfigError("unlabelled partition is empty")

    run = _Run(stage, cfg, {"student": student}, validation, checkpoint_dir)
    run.log.meta["distill_warmup_iters"] = warmup
    lab = BatchCycler(labelled, cfg.batch_size, cfg.seed, LABELLED_STREAM, cfg.flip_augment)
    unl = BatchCycler(unlabelled, cfg.batch_size, cfg.seed, UNLABELLED_STREAM, cfg.flip_augment) if unlabelled else None
    dtype = _dtype(student)
    student.train()
    for it in range(cfg.max_iters):
        lr = run.lr(it)
        x, y = lab.next(dtype)
        xu = unl.next(dtype)[0] if it >= warmup else None
        parts = distillation_parts(
            student, x, y, xu, feature_teacher, list(prob_teachers.values()), weights, cfg.pseudo_threshold
        )
        run.step(it, lr, total_sslkd_loss(parts), parts.as_floats())

    after = {k: content_hash(t) for k, t in frozen.items()}
    if after != before:
        raise TrainingError(f"{stage}: frozen teacher state changed during training")
    run.log.meta["teacher_hashes"] = before
    return student, run.finish()


def train_student_sslkd(
    student: SegModel,
    teacher1: SegModel,
    teacher2: SegModel,
    labelled: Sequence[Sample],
    unlabelled: Sequence[Sample],
    cfg: TrainConfig,
    *,
    prob_sources: Sequence[str] = ("teacher1", "teacher2"),
    validation: Sequence[Sample] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[SegModel, TrainLog]:
    """Distil frozen teachers into the student at feature, probability and label level.

    Before ``cfg.warmup_iters`` the student sees only the supervised loss.
    Afterwards the loss adds the feature MAE against teacher1's backbone tap
    and the probability MAE and pseudo-label CE against the aggregated
    teacher prediction, all on the unlabelled batch. ``prob_sources`` picks
    which teachers enter the aggregate.
    """
    teachers = {"teacher1": teacher1, "teacher2": teacher2}
    unknown = set(prob_sources) - set(teachers)
    if unknown or not prob_sources:
        raise ConfigError(f"prob_sources must be a non-empty subset of {sorted(teachers)}")
    return _distill(
        "sslkd",
        student,
        teacher1,
        {k: teachers[k] for k in prob_sources},
        labelled,
        unlabelled,
        cfg,
        cfg.loss_weights,
        validation,
        checkpoint_dir,
    )


def train_cms_baseline(
    student: SegModel,
    teacher: SegModel,
    labelled: Sequence[Sample],
    unlabelled: Sequence[Sample],
    cfg: TrainConfig,
    *,
    validation: Sequence[Sample] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> tuple[SegModel, TrainLog]:
    """Student trained on labels plus one frozen teacher's pseudo labels; no MAE terms."""
    w_sup, _, _, w_u = cfg.loss_weights
    return _distill(
        "cms",
        student,
        None,
        {"teacher2": teacher},
        labelled,
        unlabelled,
        cfg,
        (w_sup, 0.0, 0.0, w_u),
        validation,
        checkpoint_dir,
    )

