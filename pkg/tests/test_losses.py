import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from sslkd.errors import ConfigError, ShapeError, ValidationError
from sslkd.losses import (
    LossParts,
    aggregate_teacher_probs,
    feature_mae,
    prob_mae,
    pseudo_labels,
    softmax_probs,
    supervised_ce,
    total_sslkd_loss,
)


def pixel_probs(*pixels):
    """(C, 1, N) probability map from per-pixel class vectors."""
    return torch.tensor(pixels, dtype=torch.float64).T.unsqueeze(1)


def test_softmax_examples():
    p = softmax_probs(torch.zeros(2, 1, 1, dtype=torch.float64))
    assert p.flatten().tolist() == [0.5, 0.5]
    p = softmax_probs(torch.tensor([[[math.log(3)]], [[0.0]]], dtype=torch.float64))
    assert p.flatten().tolist() == pytest.approx([0.75, 0.25], abs=1e-12)


def test_softmax_shift_invariance_without_overflow():
    z = torch.randn(2, 4, 4, dtype=torch.float64)
    assert torch.allclose(softmax_probs(z), softmax_probs(z + 1000.0), atol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValidationError):
        softmax_probs(torch.tensor([[[float("nan")]], [[0.0]]]))


def test_supervised_ce_examples():
    assert float(supervised_ce(pixel_probs((0.5, 0.5)), torch.tensor([[0]]))) == pytest.approx(math.log(2), abs=1e-6)
    assert float(supervised_ce(pixel_probs((1.0, 0.0)), torch.tensor([[0]]))) == pytest.approx(0.0, abs=1e-12)
    two = supervised_ce(pixel_probs((0.9, 0.1), (0.2, 0.8)), torch.tensor([[0, 1]]))
    assert float(two) == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-12)
    assert float(two) == pytest.approx(0.164252, abs=1e-6)


def test_supervised_ce_ignore_index():
    probs = pixel_probs((0.9, 0.1), (0.2, 0.8))
    assert float(supervised_ce(probs, torch.tensor([[0, 255]]), ignore_index=255)) == pytest.approx(-math.log(0.9))
    with pytest.raises(ValidationError):
        supervised_ce(probs, torch.tensor([[255, 255]]), ignore_index=255)


def test_supervised_ce_floor_keeps_loss_finite():
    loss = supervised_ce(pixel_probs((1.0, 0.0)), torch.tensor([[1]]))
    assert float(loss) == pytest.approx(-math.log(1e-12))


def test_supervised_ce_rejects_bad_labels():
    with pytest.raises(ValidationError):
        supervised_ce(pixel_probs((0.5, 0.5)), torch.tensor([[2]]))
    with pytest.raises(ShapeError):
        supervised_ce(pixel_probs((0.5, 0.5)), torch.tensor([[0, 1]]))


def test_feature_mae_examples():
    f = torch.randn(3, 2, 2, dtype=torch.float64)
    assert float(feature_mae(f, f.clone())) == 0.0
    teacher = torch.tensor([[[1.0, 2.0]]], dtype=torch.float64)
    assert float(feature_mae(teacher, torch.zeros_like(teacher))) == pytest.approx(1.5, abs=1e-12)
    assert float(feature_mae(f, f + 0.25)) == pytest.approx(0.25, abs=1e-12)


def test_feature_mae_shape_error_lists_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3, 3\).*\(4, 3, 3\)"):
        feature_mae(torch.zeros(2, 3, 3), torch.zeros(4, 3, 3))


def test_feature_mae_zero_difference_subgradient_is_zero():
    t = torch.ones(1, 2, 2, dtype=torch.float64)
    s = t.clone().requires_grad_(True)
    feature_mae(t, s).backward()
    assert torch.equal(s.grad, torch.zeros_like(s))


def test_aggregate_examples():
    agg = aggregate_teacher_probs(pixel_probs((0.8, 0.2)), pixel_probs((0.6, 0.4)))
    assert agg.flatten().tolist() == pytest.approx([0.7, 0.3], abs=1e-12)
    p = softmax_probs(torch.randn(2, 3, 3, dtype=torch.float64))
    assert torch.allclose(aggregate_teacher_probs(p, p), p, atol=1e-15)
    with pytest.raises(ShapeError):
        aggregate_teacher_probs(p, p[:, :2])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_aggregate_on_simplex_and_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    p1 = softmax_probs(3 * torch.randn(2, 4, 4, generator=g, dtype=torch.float64))
    p2 = softmax_probs(3 * torch.randn(2, 4, 4, generator=g, dtype=torch.float64))
    agg = aggregate_teacher_probs(p1, p2)
    assert torch.allclose(agg.sum(0), torch.ones(4, 4, dtype=torch.float64), atol=1e-6)
    assert (agg >= torch.minimum(p1, p2) - 1e-15).all() and (agg <= torch.maximum(p1, p2) + 1e-15).all()


def test_pseudo_labels_examples():
    labels, valid = pseudo_labels(pixel_probs((0.7, 0.3)))
    assert labels.tolist() == [[0]] and valid.all()
    labels, valid = pseudo_labels(pixel_probs((0.5, 0.5)), threshold=0.5)
    assert labels.tolist() == [[0]] and valid.all()
    labels, valid = pseudo_labels(pixel_probs((0.5, 0.5), (0.1, 0.9)), threshold=0.6)
    assert valid.tolist() == [[False, True]]


def test_pseudo_labels_match_brute_force_argmax():
    rng = np.random.default_rng(0)
    raw = rng.random((2, 4, 4))
    p = torch.from_numpy(raw / raw.sum(0, keepdims=True))
    labels, _ = pseudo_labels(p)
    for i in range(4):
        for j in range(4):
            expected = 0 if p[0, i, j] >= p[1, i, j] else 1
            assert labels[i, j] == expected


def test_pseudo_labels_carry_no_gradient():
    z = torch.randn(2, 3, 3, requires_grad=True)
    labels, valid = pseudo_labels(softmax_probs(z))
    assert not labels.requires_grad and not valid.requires_grad


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_argmax_invariant_to_per_pixel_shift(seed, c):
    g = torch.Generator().manual_seed(seed)
    z = torch.randn(2, 4, 4, generator=g, dtype=torch.float64)
    shift = c * torch.rand(1, 4, 4, generator=g, dtype=torch.float64)
    assert torch.equal(pseudo_labels(softmax_probs(z))[0], pseudo_labels(softmax_probs(z + shift))[0])


def test_prob_mae_examples():
    p = softmax_probs(torch.randn(2, 2, 2, dtype=torch.float64))
    assert float(prob_mae(p, p.clone())) == 0.0
    a, b = pixel_probs((0.7, 0.3)), pixel_probs((0.5, 0.5))
    assert float(prob_mae(a, b)) == pytest.approx(0.2, abs=1e-12)
    assert float(prob_mae(b, a)) == float(prob_mae(a, b))


def test_total_loss_examples():
    parts = LossParts(0.5, 0.1, 0.2, 0.3)
    assert total_sslkd_loss(parts) == pytest.approx(1.1, abs=1e-12)
    sup = torch.tensor(0.5, dtype=torch.float64)
    assert total_sslkd_loss(LossParts(sup, 0.1, 0.2, 0.3, weights=(1, 0, 0, 0))) == sup
    assert total_sslkd_loss(LossParts(0, 0, 0, 0)) == 0
    with pytest.raises(ConfigError):
        total_sslkd_loss(LossParts(1, 1, 1, 1, weights=(1, -1, 0, 0)))


def test_reduction_matches_per_pixel_sum():
    rng = np.random.default_rng(1)
    for _ in range(10):
        logits = torch.from_numpy(rng.normal(size=(2, 4, 4)))
        labels = torch.from_numpy(rng.integers(0, 2, size=(4, 4)))
        p = softmax_probs(logits)
        brute = sum(-math.log(float(p[labels[i, j], i, j])) for i in range(4) for j in range(4)) / 16
        assert abs(float(supervised_ce(p, labels)) - brute) < 1e-9

        ft = rng.normal(size=(3, 4, 4))
        fs = rng.normal(size=(3, 4, 4))
        brute = sum(abs(ft[c, i, j] - fs[c, i, j]) for c in range(3) for i in range(4) for j in range(4)) / 48
        assert abs(float(feature_mae(torch.from_numpy(ft), torch.from_numpy(fs))) - brute) < 1e-9


def test_batched_inputs_average_over_batch_too():
    p = softmax_probs(torch.randn(3, 2, 4, 4, dtype=torch.float64))
    y = torch.randint(0, 2, (3, 4, 4))
    per_image = torch.stack([supervised_ce(p[i], y[i]) for i in range(3)]).mean()
    assert torch.allclose(supervised_ce(p, y), per_image, atol=1e-12)
