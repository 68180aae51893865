"""Loss definitions checked against brute-force per-pixel reference loops.

Reference values: uniform probabilities over C classes give CE = ln C
regardless of the target; a perfect one-hot prediction gives CE = 0 and
Dice = -1, so the compound loss bottoms out at -1 per network.
"""

import math

import numpy as np
import pytest
import torch

from spineseg.losses import (
    DICE_SMOOTH,
    LossReport,
    cross_entropy,
    cross_entropy_labels,
    dice_loss,
    one_hot,
    segmentation_loss,
)


def brute_force_ce(probs, target):
    p = probs.detach().numpy()
    t = target.detach().numpy()
    total, count = 0.0, 0
    b, c = p.shape[:2]
    spatial = p.reshape(b, c, -1).shape[-1]
    pf, tf = p.reshape(b, c, -1), t.reshape(b, c, -1)
    for i in range(b):
        for s in range(spatial):
            for k in range(c):
                total += -tf[i, k, s] * math.log(max(pf[i, k, s], 1e-12))
            count += 1
    return total / count


def brute_force_dice(probs, target):
    p = probs.detach().numpy()
    t = target.detach().numpy()
    b, c = p.shape[:2]
    pf, tf = p.reshape(b, c, -1), t.reshape(b, c, -1)
    acc = 0.0
    for i in range(b):
        for k in range(c):
            inter = float((pf[i, k] * tf[i, k]).sum())
            denom = float(pf[i, k].sum() + tf[i, k].sum())
            acc += (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return -acc / (b * c)


def random_probs(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    raw = torch.rand(shape, generator=g) + 0.05
    return raw / raw.sum(dim=1, keepdim=True)


class TestCrossEntropy:
    def test_matches_brute_force_2d(self):
        probs = random_probs((2, 20, 3, 3), seed=1)
        labels = torch.randint(0, 20, (2, 3, 3), generator=torch.Generator().manual_seed(2))
        target = one_hot(labels, 20)
        got = float(cross_entropy(probs, target))
        assert got == pytest.approx(brute_force_ce(probs, target), abs=1e-6)

    def test_matches_brute_force_3d(self):
        probs = random_probs((1, 5, 2, 3, 3), seed=3)
        labels = torch.randint(0, 5, (1, 2, 3, 3), generator=torch.Generator().manual_seed(4))
        target = one_hot(labels, 5)
        got = float(cross_entropy(probs, target))
        assert got == pytest.approx(brute_force_ce(probs, target), abs=1e-6)

    def test_uniform_is_log_c(self):
        probs = torch.full((2, 20, 4, 4), 1 / 20)
        labels = torch.randint(0, 20, (2, 4, 4))
        got = float(cross_entropy_labels(probs, labels))
        assert got == pytest.approx(math.log(20), abs=1e-6)

    def test_perfect_prediction_is_zero(self):
        labels = torch.randint(0, 6, (2, 5, 5))
        probs = one_hot(labels, 6)
        assert float(cross_entropy(probs, probs)) == pytest.approx(0.0, abs=1e-9)

    def test_floor_keeps_loss_finite(self):
        labels = torch.zeros((1, 2, 2), dtype=torch.long)
        probs = torch.zeros((1, 3, 2, 2))
        probs[:, 1] = 1.0  # target class has exactly zero mass
        val = float(cross_entropy_labels(probs, labels))
        assert math.isfinite(val)
        assert val == pytest.approx(-math.log(1e-12), rel=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy(torch.ones(1, 3, 2, 2), torch.ones(1, 3, 2, 3))


class TestDice:
    def test_matches_brute_force(self):
        probs = random_probs((2, 7, 3, 4), seed=5)
        labels = torch.randint(0, 7, (2, 3, 4), generator=torch.Generator().manual_seed(6))
        target = one_hot(labels, 7)
        got = float(dice_loss(probs, target))
        assert got == pytest.approx(brute_force_dice(probs, target), abs=1e-6)

    def test_perfect_is_minus_one(self):
        labels = torch.randint(0, 4, (2, 4, 4))
        # every class present so the smooth term cannot mask a real mismatch
        labels[:, 0, :4] = torch.arange(4)
        probs = one_hot(labels, 4)
        assert float(dice_loss(probs, probs)) == pytest.approx(-1.0, abs=1e-6)

    def test_absent_class_counts_as_perfect(self):
        # class 2 in neither target nor prediction: smooth/smooth = 1
        target = one_hot(torch.zeros((1, 3, 3), dtype=torch.long), 3)
        got = float(dice_loss(target, target))
        assert got == pytest.approx(-1.0, abs=1e-6)

    def test_range_bounds(self):
        for seed in range(5):
            probs = random_probs((1, 6, 5, 5), seed=seed)
            labels = torch.randint(0, 6, (1, 5, 5), generator=torch.Generator().manual_seed(seed))
            val = float(dice_loss(probs, one_hot(labels, 6)))
            assert -1.0 <= val <= 0.0


class TestOneHot:
    def test_round_trip(self):
        labels = torch.randint(0, 9, (2, 4, 5, 5))
        oh = one_hot(labels, 9)
        assert oh.shape == (2, 9, 4, 5, 5)
        assert torch.equal(oh.argmax(dim=1), labels)
        assert torch.all(oh.sum(dim=1) == 1)

    def test_channel_singleton_squeezed(self):
        labels = torch.randint(0, 3, (2, 1, 4, 4))
        assert one_hot(labels, 3).shape == (2, 3, 4, 4)


class TestSegmentationLoss:
    def test_components_sum(self):
        probs = random_probs((2, 8, 2, 6, 6), seed=9)
        labels = torch.randint(0, 8, (2, 2, 6, 6))
        report = segmentation_loss(probs, labels)
        assert isinstance(report, LossReport)
        assert float(report.total) == pytest.approx(
            float(report.l_ce) + float(report.l_dc), abs=1e-7
        )

    def test_perfect_prediction_floor(self):
        labels = torch.randint(0, 5, (1, 3, 8, 8))
        labels[0, 0, 0, :5] = torch.arange(5)
        probs = one_hot(labels, 5)
        report = segmentation_loss(probs, labels)
        assert float(report.total) == pytest.approx(-1.0, abs=1e-5)

    def test_gradients_flow(self):
        probs = random_probs((1, 4, 3, 3), seed=10).requires_grad_(True)
        labels = torch.randint(0, 4, (1, 3, 3))
        segmentation_loss(probs, labels).total.backward()
        assert probs.grad is not None
        assert torch.isfinite(probs.grad).all()


def test_gradcheck_double_precision():
    logits = torch.randn(1, 4, 3, 3, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 4, (1, 3, 3))
    target = one_hot(labels, 4).double()

    def ce_fn(x):
        return cross_entropy(torch.softmax(x, dim=1), target)

    def dc_fn(x):
        return dice_loss(torch.softmax(x, dim=1), target)

    assert torch.autograd.gradcheck(ce_fn, (logits,), eps=1e-6, atol=1e-4)
    assert torch.autograd.gradcheck(dc_fn, (logits,), eps=1e-6, atol=1e-4)
