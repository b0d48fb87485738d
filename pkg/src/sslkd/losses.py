"""Losses and probability transforms used by the teacher and student stages.

Tensors follow the (..., C, H, W) convention: the class or channel axis is
third from the end, so both single maps (C, H, W) and batches (B, C, H, W)
are accepted. Label maps are (..., H, W).
"""

from __future__ import annotations

import dataclasses

import torch

from .errors import ConfigError, ShapeError, ValidationError

IGNORE_INDEX = 255
PROB_FLOOR = 1e-12
CLASS_DIM = -3


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def softmax_probs(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities (numerically stable softmax over the class axis)."""
    if not torch.isfinite(logits).all():
        raise ValidationError("logits contain non-finite values")
    return torch.softmax(logits, dim=CLASS_DIM)


def supervised_ce(probs: torch.Tensor, labels: torch.Tensor, ignore_index: int | None = None) -> torch.Tensor:
    """Mean per-pixel cross-entropy ``-ln p[true class]`` over non-ignored pixels.

    Probabilities are clamped below at ``PROB_FLOOR`` before the log.
    """
    if probs.shape[:CLASS_DIM] + probs.shape[CLASS_DIM + 1 :] != labels.shape:
        raise ShapeError(f"probs {tuple(probs.shape)} and labels {tuple(labels.shape)} disagree")
    labels = labels.long()
    n_classes = probs.shape[CLASS_DIM]
    keep = torch.ones_like(labels, dtype=torch.bool) if ignore_index is None else labels != ignore_index
    if not keep.any():
        raise ValidationError("every pixel is ignored; cross-entropy is undefined")
    if ((labels[keep] < 0) | (labels[keep] >= n_classes)).any():
        raise ValidationError(f"labels outside [0, {n_classes}) and not equal to ignore_index")
    safe = torch.where(keep, labels, torch.zeros_like(labels))
    p_true = torch.gather(probs, CLASS_DIM % probs.ndim, safe.unsqueeze(CLASS_DIM % probs.ndim)).squeeze(
        CLASS_DIM % probs.ndim
    )
    nll = -torch.log(p_true.clamp_min(PROB_FLOOR))
    return nll[keep].mean()


def feature_mae(f_teacher: torch.Tensor, f_student: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over every channel and spatial element.

    The teacher map is detached, so no gradient reaches its producer.
    """
    if f_teacher.shape != f_student.shape:
        raise ShapeError(
            f"feature tap mismatch: teacher {tuple(f_teacher.shape)} vs student {tuple(f_student.shape)}"
        )
    return (f_student - f_teacher.detach()).abs().mean()


def aggregate_teacher_probs(*prob_maps: torch.Tensor) -> torch.Tensor:
    """Arithmetic mean of teacher probability maps (stays on the simplex)."""
    if not prob_maps:
        raise ValueError("need at least one probability map")
    first = prob_maps[0]
    for p in prob_maps[1:]:
        _same_shape(first, p, "aggregate_teacher_probs")
    return torch.stack([p.detach() for p in prob_maps]).mean(dim=0)


def pseudo_labels(p: torch.Tensor, threshold: float | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Hard labels by argmax (ties go to the lower class index) plus a validity mask.

    With ``threshold`` set, pixels whose top probability is below it are
    marked invalid. Labels are computed without gradient.
    """
    with torch.no_grad():
        top, labels = p.detach().max(dim=CLASS_DIM)
        if threshold is None:
            valid = torch.ones_like(labels, dtype=torch.bool)
        else:
            if not 0.0 <= threshold <= 1.0:
                raise ConfigError("pseudo-label threshold must lie in [0, 1]")
            valid = top >= threshold
    return labels, valid


def masked_labels(labels: torch.Tensor, valid: torch.Tensor, ignore_index: int = IGNORE_INDEX) -> torch.Tensor:
    return torch.where(valid, labels, torch.full_like(labels, ignore_index))


def prob_mae(p_agg: torch.Tensor, p_student: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over classes and pixels; ``p_agg`` is treated as a constant."""
    _same_shape(p_agg, p_student, "prob_mae")
    return (p_student - p_agg.detach()).abs().mean()


@dataclasses.dataclass
class LossParts:
    sup: torch.Tensor | float = 0.0
    dis_f: torch.Tensor | float = 0.0
    dis_p: torch.Tensor | float = 0.0
    unsup: torch.Tensor | float = 0.0
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def components(self):
        return (self.sup, self.dis_f, self.dis_p, self.unsup)

    def as_floats(self) -> dict[str, float]:
        return {
            name: float(v.detach()) if torch.is_tensor(v) else float(v)
            for name, v in zip(("l_sup", "l_dis_f", "l_dis_p", "l_unsup"), self.components())
        }


def total_sslkd_loss(parts: LossParts) -> torch.Tensor | float:
    """Weighted linear sum of the four loss components."""
    if len(parts.weights) != 4 or any(w < 0 for w in parts.weights):
        raise ConfigError(f"loss weights must be four non-negative numbers, got {parts.weights}")
    total = 0.0
    for w, v in zip(parts.weights, parts.components()):
        if w:
            total = total + w * v
    return total
