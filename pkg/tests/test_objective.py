import math

import numpy as np
import pytest
import torch

from wmhseg.datamodel import Mask2D
from wmhseg.nets import DiagGaussian
from wmhseg.objective import (
    ConfusionCounts,
    binarize,
    confusion,
    cross_entropy,
    dsc,
    kl_divergence,
    total_loss,
)


def gaussian(mean, log_var):
    return DiagGaussian(
        mean=torch.tensor([mean], dtype=torch.float64),
        log_var=torch.tensor([log_var], dtype=torch.float64),
    )


class TestCrossEntropy:
    def test_zero_logits_give_ln2(self):
        logits = torch.zeros(1, 1, 4, 4)
        mask = (torch.rand(1, 1, 4, 4) > 0.5).float()
        assert abs(cross_entropy(logits, mask).item() - math.log(2)) < 1e-6

    def test_saturated_correct_near_zero(self):
        mask = (torch.rand(1, 1, 8, 8) > 0.5).float()
        logits = torch.where(mask > 0, 20.0, -20.0)
        assert cross_entropy(logits, mask).item() < 1e-6

    def test_hand_value_mixed(self):
        # mean of -log sigmoid(0) and -log sigmoid(20)
        logits = torch.tensor([[[[0.0, 20.0]]]])
        mask = torch.ones(1, 1, 1, 2)
        expected = (math.log(2) + math.log1p(math.exp(-20.0))) / 2
        assert abs(cross_entropy(logits, mask).item() - expected) < 1e-6
        assert abs(cross_entropy(logits, mask).item() - 0.3466) < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))

    def test_stable_at_extreme_logits(self):
        logits = torch.tensor([[[[200.0, -200.0]]]])
        mask = torch.zeros(1, 1, 1, 2)
        value = cross_entropy(logits, mask).item()
        assert math.isfinite(value) and abs(value - 100.0) < 1e-3


class TestKLDivergence:
    def test_identical_zero(self):
        q = gaussian([0.3, -0.2], [0.1, -0.4])
        p = gaussian([0.3, -0.2], [0.1, -0.4])
        assert abs(kl_divergence(q, p).item()) < 1e-7

    def test_unit_shift_half(self):
        assert abs(kl_divergence(gaussian([1.0], [0.0]), gaussian([0.0], [0.0])).item() - 0.5) < 1e-9

    def test_six_dims_three(self):
        q = gaussian([1.0] * 6, [0.0] * 6)
        p = gaussian([0.0] * 6, [0.0] * 6)
        assert abs(kl_divergence(q, p).item() - 3.0) < 1e-9

    def test_monte_carlo_cross_check(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            mu_q, mu_p = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
            lv_q, lv_p = rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
            analytic = kl_divergence(
                DiagGaussian(torch.tensor(mu_q)[None], torch.tensor(lv_q)[None]),
                DiagGaussian(torch.tensor(mu_p)[None], torch.tensor(lv_p)[None]),
            ).item()
            z = mu_q + np.exp(0.5 * lv_q) * rng.standard_normal((100_000, 6))
            log_q = -0.5 * (((z - mu_q) ** 2) / np.exp(lv_q) + lv_q + math.log(2 * math.pi)).sum(axis=1)
            log_p = -0.5 * (((z - mu_p) ** 2) / np.exp(lv_p) + lv_p + math.log(2 * math.pi)).sum(axis=1)
            assert abs((log_q - log_p).mean() - analytic) < 0.05

    def test_non_negative_random_pairs(self):
        rng = np.random.default_rng(1)
        mu_q = torch.tensor(rng.uniform(-3, 3, (10_000, 6)))
        mu_p = torch.tensor(rng.uniform(-3, 3, (10_000, 6)))
        lv_q = torch.tensor(rng.uniform(-4, 4, (10_000, 6)))
        lv_p = torch.tensor(rng.uniform(-4, 4, (10_000, 6)))
        per_item = 0.5 * (
            torch.exp(lv_q - lv_p) + (mu_p - mu_q) ** 2 / torch.exp(lv_p) - 1.0 + lv_p - lv_q
        ).sum(dim=-1)
        assert per_item.min().item() >= -1e-7

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            kl_divergence(gaussian([0.0], [0.0]), gaussian([0.0, 0.0], [0.0, 0.0]))


class TestTotalLoss:
    def test_probabilistic_composition(self):
        b = total_loss(0.5, 2.0, 1.0, "prob-unet")
        assert b.total == pytest.approx(2.5)
        assert abs(b.total - (b.ce + b.beta * b.kl)) < 1e-6

    def test_deterministic_ignores_kl(self):
        b = total_loss(0.7, 5.0, 1.0, "unet")
        assert b.total == pytest.approx(0.7)
        assert b.kl == 0.0

    def test_beta_zero_ablation(self):
        b = total_loss(0.4, 9.0, 0.0, "prob-transunet")
        assert b.total == pytest.approx(0.4)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            total_loss(0.1, 0.1, 1.0, "vgg")


class TestBinarize:
    def test_boundary_inclusive(self):
        out = binarize(np.array([[0.0]]), 0.5)
        assert out.values[0, 0] == 1

    def test_negative_logit_zero(self):
        assert binarize(np.array([[-3.0]]), 0.5).values[0, 0] == 0

    def test_sigmoid_threshold(self):
        out = binarize(np.array([[-1.0, 0.0, 1.0]]), 0.73)
        assert out.values.tolist() == [[0, 0, 1]]

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            binarize(np.zeros((2, 2)), 0.0)


class TestConfusionAndDsc:
    def test_perfect_match(self):
        values = np.zeros((10, 10), np.uint8)
        values[:1, :10] = 1
        c = confusion(Mask2D(values=values), Mask2D(values=values.copy()))
        assert (c.tp, c.fp, c.fn, c.tn) == (10, 0, 0, 90)
        assert dsc(c) == 1.0

    def test_all_wrong(self):
        pred = Mask2D(values=np.ones((10, 10), np.uint8))
        truth = Mask2D(values=np.zeros((10, 10), np.uint8))
        c = confusion(pred, truth)
        assert c.fp == 100 and c.tp == 0
        assert dsc(c) == 0.0

    def test_hand_counts(self):
        pred = Mask2D(values=np.array([[1, 1, 1, 0]], np.uint8))
        truth = Mask2D(values=np.array([[1, 1, 0, 1]], np.uint8))
        c = confusion(pred, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 0)
        assert dsc(c) == pytest.approx(4 / 6)

    def test_total_invariant(self):
        rng = np.random.default_rng(2)
        a = Mask2D(values=(rng.random((13, 7)) > 0.5).astype(np.uint8))
        b = Mask2D(values=(rng.random((13, 7)) > 0.5).astype(np.uint8))
        assert confusion(a, b).total == 13 * 7

    def test_both_empty_convention(self):
        assert dsc(ConfusionCounts(tp=0, fp=0, fn=0, tn=64)) == 1.0

    def test_symmetry_and_set_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            h, w = rng.integers(2, 24, size=2)
            a = Mask2D(values=(rng.random((h, w)) > rng.uniform(0.3, 0.9)).astype(np.uint8))
            b = Mask2D(values=(rng.random((h, w)) > rng.uniform(0.3, 0.9)).astype(np.uint8))
            forward = dsc(confusion(a, b))
            assert forward == dsc(confusion(b, a))
            sa = set(np.flatnonzero(a.values).tolist())
            sb = set(np.flatnonzero(b.values).tolist())
            oracle = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
            assert forward == oracle

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            confusion(Mask2D(values=np.zeros((2, 2), np.uint8)), Mask2D(values=np.zeros((2, 3), np.uint8)))
