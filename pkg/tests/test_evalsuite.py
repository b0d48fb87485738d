import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sslkd.dataspace import Sample
from sslkd.errors import ConfigError, ShapeError
from sslkd.evalsuite import (
    Confusion,
    confusion_counts,
    evaluate,
    format_table,
    metrics_from_confusion,
    predict_labels,
)
from sslkd.modelzoo import ModelSpec, build_model


def brute_confusion(pred, gt, ignore_index=None):
    tp = fp = fn = tn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if ignore_index is not None and g == ignore_index:
            continue
        if p == 1 and g == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif g == 1:
            fn += 1
        else:
            tn += 1
    return Confusion(tp, fp, fn, tn)


def test_confusion_examples():
    gt = np.array([[1, 0], [1, 0], [0, 0]])
    assert confusion_counts(gt, gt) == Confusion(tp=2, fp=0, fn=0, tn=4)
    assert confusion_counts(np.ones((2, 2)), np.zeros((2, 2))) == Confusion(fp=4)
    with pytest.raises(ShapeError):
        confusion_counts(np.ones((2, 2)), np.ones((2, 3)))


def test_confusion_ignore_index():
    gt = np.array([[1, 255], [0, 1]])
    pred = np.array([[1, 1], [1, 0]])
    assert confusion_counts(pred, gt, ignore_index=255) == Confusion(tp=1, fp=1, fn=1, tn=0)


def test_confusion_matches_brute_force_loop():
    rng = np.random.default_rng(0)
    for _ in range(20):
        pred = rng.integers(0, 2, (8, 8))
        gt = rng.integers(0, 2, (8, 8))
        assert confusion_counts(pred, gt) == brute_confusion(pred, gt)


def test_metrics_hand_example():
    r = metrics_from_confusion(Confusion(tp=3, fp=1, fn=1, tn=5))
    assert (r.precision, r.recall, r.f1, r.iou, r.oa) == pytest.approx((0.75, 0.75, 0.75, 0.6, 0.8), abs=1e-12)
    assert r.undefined == []


def test_perfect_prediction_scores_one():
    r = metrics_from_confusion(Confusion(tp=7, tn=3))
    assert (r.iou, r.oa, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0, 1.0)


def test_zero_over_zero_is_flagged():
    r = metrics_from_confusion(Confusion(tn=10))
    assert r.iou == r.precision == r.recall == r.f1 == 0.0
    assert set(r.undefined) == {"iou", "precision", "recall", "f1"}
    with pytest.raises(ConfigError):
        metrics_from_confusion(Confusion())


confusions = st.builds(Confusion, *(st.integers(0, 10_000) for _ in range(4))).filter(lambda c: c.total > 0)


@settings(max_examples=200, deadline=None)
@given(confusions)
def test_metric_bounds_and_f1_iou_identity(c):
    r = metrics_from_confusion(c)
    for v in (r.iou, r.oa, r.precision, r.recall, r.f1):
        assert 0.0 <= v <= 1.0
    assert abs(r.f1 - 2 * r.iou / (1 + r.iou)) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_swap_pred_gt_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 2, (6, 6)), rng.integers(0, 2, (6, 6))
    fwd = metrics_from_confusion(confusion_counts(a, b))
    rev = metrics_from_confusion(confusion_counts(b, a))
    assert fwd.oa == rev.oa
    assert fwd.precision == rev.recall and fwd.recall == rev.precision


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_accumulation_is_linear(seed, n_parts):
    rng = np.random.default_rng(seed)
    pred, gt = rng.integers(0, 2, 120), rng.integers(0, 2, 120)
    cuts = np.sort(rng.choice(np.arange(1, 120), size=n_parts - 1, replace=False))
    total = Confusion()
    for p, g in zip(np.split(pred, cuts), np.split(gt, cuts)):
        total = total + confusion_counts(p, g)
    assert total == confusion_counts(pred, gt)


def _samples(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Sample(f"s{i}", rng.random((3, size, size)).astype(np.float32), rng.integers(0, 2, (size, size)).astype(np.uint8))
        for i in range(n)
    ]


@pytest.fixture(scope="module")
def student():
    return build_model(ModelSpec(family="dilated_pyramid", backbone_depth="shallow", input_size=32), 0).eval()


def test_evaluate_matches_hand_chained_pipeline(student):
    samples = _samples(3)
    report = evaluate(student, samples)
    total = Confusion()
    with torch.no_grad():
        for s in samples:
            _, logits = student(torch.from_numpy(s.image[None]))
            pred = logits[0].argmax(0).numpy()
            total = total + brute_confusion(pred, s.mask)
    expected = metrics_from_confusion(total)
    assert (report.tp, report.fp, report.fn, report.tn) == (total.tp, total.fp, total.fn, total.tn)
    assert report.iou == expected.iou and report.f1 == expected.f1
    assert report.gflops > 0


def test_evaluate_is_deterministic(student):
    samples = _samples(2, seed=1)
    assert evaluate(student, samples) == evaluate(student, samples)


def test_background_only_predictor_has_zero_recall():
    model = build_model(ModelSpec(family="dilated_pyramid", backbone_depth="shallow", input_size=32), 0)
    with torch.no_grad():
        model.classifier.weight.zero_()
        model.classifier.bias.copy_(torch.tensor([5.0, -5.0]))
    report = evaluate(model.eval(), _samples(2))
    assert report.recall == 0.0 and report.tp == 0


def test_evaluate_rejects_empty_partition(student):
    with pytest.raises(ConfigError):
        evaluate(student, [])


def test_predict_labels_restores_mode(student):
    student.train()
    predict_labels(student, _samples(1))
    assert student.training
    student.eval()


def test_table_formatting_and_ties():
    r = metrics_from_confusion(Confusion(tp=3, fp=1, fn=1, tn=5), gflops=0.0123)
    table = format_table([("A", r), ("B", r)])
    assert table.count("**60.00%**") == 2 and "80.00%" in table
    assert table.splitlines()[0] == "| Method | IoU | OA | Precision | Recall | F1 | GFLOPs |"
