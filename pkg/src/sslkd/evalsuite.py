"""Road-class confusion counts, derived metrics, model evaluation and comparison tables."""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np
import torch
from pydantic import BaseModel

from .dataspace import Sample
from .errors import ConfigError, ShapeError
from .losses import pseudo_labels, softmax_probs
from .modelzoo import SegModel, estimate_gflops

METRIC_COLUMNS = ("iou", "oa", "precision", "recall", "f1")
COLUMN_TITLES = {"iou": "IoU", "oa": "OA", "precision": "Precision", "recall": "Recall", "f1": "F1", "gflops": "GFLOPs"}


@dataclasses.dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


class MetricsReport(BaseModel):
    model_id: str = ""
    iou: float
    oa: float
    precision: float
    recall: float
    f1: float
    gflops: float = 0.0
    n_pixels: int
    tp: int
    fp: int
    fn: int
    tn: int
    # metrics whose denominator was zero and were set to 0 by convention
    undefined: list[str] = []
    averaging: str = "micro"


def confusion_counts(pred, gt, ignore_index: int | None = None) -> Confusion:
    """Pixel counts with road (class 1) as the positive class."""
    pred = np.asarray(pred.cpu() if torch.is_tensor(pred) else pred)
    gt = np.asarray(gt.cpu() if torch.is_tensor(gt) else gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    if ignore_index is not None:
        keep = gt != ignore_index
        pred, gt = pred[keep], gt[keep]
    p, g = pred == 1, gt == 1
    return Confusion(
        tp=int(np.count_nonzero(p & g)),
        fp=int(np.count_nonzero(p & ~g)),
        fn=int(np.count_nonzero(~p & g)),
        tn=int(np.count_nonzero(~p & ~g)),
    )


def _ratio(num: int, den: int, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def metrics_from_confusion(c: Confusion, model_id: str = "", gflops: float = 0.0) -> MetricsReport:
    if c.total <= 0:
        raise ConfigError("cannot derive metrics from an empty confusion")
    undefined: list[str] = []
    precision = _ratio(c.tp, c.tp + c.fp, "precision", undefined)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", undefined)
    if precision + recall > 0:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
        undefined.append("f1")
    return MetricsReport(
        model_id=model_id,
        iou=_ratio(c.tp, c.tp + c.fp + c.fn, "iou", undefined),
        oa=(c.tp + c.tn) / c.total,
        precision=precision,
        recall=recall,
        f1=f1,
        gflops=gflops,
        n_pixels=c.total,
        tp=c.tp,
        fp=c.fp,
        fn=c.fn,
        tn=c.tn,
        undefined=undefined,
    )


def _image_batch(samples: Sequence[Sample], dtype) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).to(dtype)


def predict_labels(model: SegModel, samples: Sequence[Sample]) -> list[np.ndarray]:
    """Eval-mode argmax label map for each sample, forwarded one at a time."""
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    out = []
    try:
        with torch.no_grad():
            for s in samples:
                _, logits = model(_image_batch([s], dtype))
                labels, _ = pseudo_labels(softmax_probs(logits))
                out.append(labels[0].numpy())
    finally:
        model.train(was_training)
    return out


def evaluate(
    model: SegModel,
    samples: Sequence[Sample],
    ignore_index: int | None = None,
    model_id: str = "",
) -> MetricsReport:
    """Micro-averaged road metrics over ``samples`` (confusions summed before ratios)."""
    if not samples:
        raise ConfigError("cannot evaluate on an empty partition")
    if any(s.mask is None for s in samples):
        raise ConfigError("every evaluation sample needs a mask")
    total = Confusion()
    for s, pred in zip(samples, predict_labels(model, samples)):
        total = total + confusion_counts(pred, s.mask, ignore_index)
    return metrics_from_confusion(total, model_id=model_id, gflops=estimate_gflops(model.spec))


# ---------------------------------------------------------------- reports


def best_rows(reports: Sequence[MetricsReport]) -> dict[str, set[int]]:
    """Row indices holding the maximum of each metric column; ties are all marked."""
    best = {}
    for col in METRIC_COLUMNS:
        values = [getattr(r, col) for r in reports]
        top = max(values)
        best[col] = {i for i, v in enumerate(values) if v == top}
    return best


def format_table(rows: Iterable[tuple[str, MetricsReport]]) -> str:
    """Markdown comparison table; best value per metric column rendered in bold."""
    rows = list(rows)
    reports = [r for _, r in rows]
    best = best_rows(reports) if reports else {}
    header = ["Method", *(COLUMN_TITLES[c] for c in (*METRIC_COLUMNS, "gflops"))]
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join(["---"] + ["---:"] * (len(header) - 1)) + "|"]
    for i, (name, rep) in enumerate(rows):
        cells = [name]
        for col in METRIC_COLUMNS:
            text = f"{100 * getattr(rep, col):.2f}%"
            cells.append(f"**{text}**" if i in best[col] else text)
        cells.append(f"{rep.gflops:.4f}")
        lines.append("| " + " | ".join(cells) + " |")
    lines.append("")
    lines.append("Metrics are for the road class, micro-averaged over validation pixels. Bold marks the best value per column.")
    return "\n".join(lines) + "\n"
