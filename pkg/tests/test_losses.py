import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dcdg import losses
from dcdg.errors import ConfigError, DomainError, ShapeError
from dcdg.losses import (
    LossWeights,
    adversarial_loss,
    bce,
    discriminator_loss,
    feature_match_loss,
    reconstruction_loss,
    segmentation_objective,
    soft_dice_loss,
)

EPS = 1e-7
LN2 = math.log(2.0)


def py_bce(s, t):
    s = min(max(s, EPS), 1 - EPS)
    return -(t * math.log(s) + (1 - t) * math.log(1 - s))


def py_dice_loss(p, g, eps=1e-5):
    inter = sum(a * b for a, b in zip(p, g))
    return 1 - (2 * inter + eps) / (sum(p) + sum(g) + eps)


class TestBCE:
    def test_half_positive(self):
        assert float(bce(0.5, 1)) == pytest.approx(0.693147, abs=1e-6)

    def test_clamped_one(self):
        assert float(bce(1.0, 1)) == pytest.approx(-math.log(1 - EPS), abs=1e-6)
        assert float(bce(1.0, 1)) == pytest.approx(1.0000001e-7, abs=1e-12)

    def test_half_negative(self):
        assert float(bce(0.5, 0)) == pytest.approx(LN2, abs=1e-6)

    def test_batched_mean(self):
        s = [0.2, 0.7, 0.9]
        want = np.mean([py_bce(v, 1) for v in s])
        assert float(bce(torch.tensor(s, dtype=torch.float64), 1)) == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("target", [2, -1, 0.5])
    def test_bad_target(self, target):
        with pytest.raises(DomainError):
            bce(0.5, target)

    def test_bad_target_array(self):
        with pytest.raises(DomainError):
            bce(torch.tensor([0.5, 0.5]), torch.tensor([1.0, 0.3]))


class TestFeatureMatch:
    def test_identical(self):
        a = torch.randn(2, 4, 3, 3)
        b = torch.randn(2, 4, 3, 3)
        assert float(feature_match_loss(a, a, b, b)) == 0.0

    def test_unit(self):
        assert float(feature_match_loss([1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0])) == pytest.approx(1.0)

    def test_opposite_signs(self):
        assert float(feature_match_loss([0.0], [0.0], [2.0], [-2.0])) == pytest.approx(16.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            feature_match_loss(torch.zeros(2, 3), torch.zeros(3, 2), torch.zeros(1), torch.zeros(1))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.integers(0, 7), st.floats(0.01, 5))
    def test_positive_when_any_pair_differs(self, vals, pos, delta):
        a = torch.tensor(vals, dtype=torch.float64)
        b = a.clone()
        b[pos % len(vals)] += delta
        assert float(feature_match_loss(a, a, a, b)) > 0
        assert float(feature_match_loss(a, b, a, a)) > 0


class TestAdversarialPair:
    def test_disc_half(self):
        assert float(discriminator_loss(0.5, 0.5)) == pytest.approx(2 * LN2, abs=1e-6)
        assert float(discriminator_loss(0.5, 0.5)) == pytest.approx(1.386294, abs=1e-6)

    def test_disc_perfect(self):
        assert float(discriminator_loss(1.0, 0.0)) == pytest.approx(0.0, abs=1e-6)

    def test_disc_worst(self):
        # hand value: -2 ln(1e-7)
        assert float(discriminator_loss(0.0, 1.0)) == pytest.approx(32.236191301916641, abs=1e-6)

    def test_adv_half(self):
        assert float(adversarial_loss(0.5, 0.5)) == pytest.approx(2 * LN2, abs=1e-6)

    def test_adv_generator_wins(self):
        assert float(adversarial_loss(0.0, 1.0)) == pytest.approx(0.0, abs=1e-6)

    def test_label_swap_identity_random(self):
        g = torch.Generator().manual_seed(0)
        for _ in range(1000):
            a = torch.rand(4, generator=g, dtype=torch.float64)
            b = torch.rand(4, generator=g, dtype=torch.float64)
            assert torch.equal(adversarial_loss(a, b), discriminator_loss(b, a))

    def test_single_sided_drops_labeled_branch(self):
        sl = torch.tensor([0.3, 0.8], dtype=torch.float64, requires_grad=True)
        su = torch.tensor([0.4, 0.6], dtype=torch.float64, requires_grad=True)
        loss = losses.single_sided_adversarial_loss(su)
        grads = torch.autograd.grad(loss, [sl, su], allow_unused=True)
        assert grads[0] is None
        assert float(loss.detach()) == pytest.approx(np.mean([py_bce(0.4, 1), py_bce(0.6, 1)]))


class TestDice:
    def test_perfect(self):
        g = (torch.rand(2, 1, 8, 8) > 0.5).double()
        assert float(soft_dice_loss(g, g)) <= 1e-6

    def test_hand_value(self):
        want = 1 - (2 + 1e-5) / (3 + 1e-5)
        assert float(soft_dice_loss([1.0, 1.0], [1.0, 0.0])) == pytest.approx(want, abs=1e-9)
        assert float(soft_dice_loss([1.0, 1.0], [1.0, 0.0])) == pytest.approx(0.33333, abs=1e-5)

    def test_empty_empty(self):
        assert float(soft_dice_loss([0.0, 0.0], [0.0, 0.0])) == 0.0

    def test_per_sample_then_mean(self):
        p = torch.tensor([[[[1.0, 1.0]]], [[[0.2, 0.6]]]], dtype=torch.float64)
        g = torch.tensor([[[[1.0, 0.0]]], [[[1.0, 1.0]]]], dtype=torch.float64)
        want = (py_dice_loss([1, 1], [1, 0]) + py_dice_loss([0.2, 0.6], [1, 1])) / 2
        assert float(soft_dice_loss(p, g)) == pytest.approx(want, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            soft_dice_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.booleans(), min_size=4, max_size=32), st.lists(st.booleans(), min_size=4, max_size=32))
    def test_symmetric_for_binary(self, a, b):
        n = min(len(a), len(b))
        p = torch.tensor(a[:n], dtype=torch.float64)
        g = torch.tensor(b[:n], dtype=torch.float64)
        assert float(soft_dice_loss(p, g)) == pytest.approx(float(soft_dice_loss(g, p)), abs=1e-15)

    def test_gradient_matches_finite_differences(self):
        gen = torch.Generator().manual_seed(3)
        p = torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 0.8 + 0.1
        g = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) > 0.5).double()
        p.requires_grad_(True)
        (grad,) = torch.autograd.grad(soft_dice_loss(p, g), p)
        h = 1e-4
        flat = p.detach().flatten()
        for i in range(flat.numel()):
            up, dn = flat.clone(), flat.clone()
            up[i] += h
            dn[i] -= h
            fd = (float(soft_dice_loss(up.view_as(p), g)) - float(soft_dice_loss(dn.view_as(p), g))) / (2 * h)
            an = float(grad.flatten()[i])
            assert abs(an - fd) <= 1e-3 * max(abs(fd), 1e-8), (i, an, fd)


class TestReconstruction:
    def test_zero(self):
        x = torch.rand(2, 1, 4, 4)
        assert float(reconstruction_loss(x, x)) == 0.0

    def test_half(self):
        assert float(reconstruction_loss([1.0, 0.0], [0.0, 0.0])) == pytest.approx(0.5)

    def test_quarter(self):
        assert float(reconstruction_loss([0.2], [0.7])) == pytest.approx(0.25, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_loss(torch.zeros(2), torch.zeros(3))


class TestSegmentationObjective:
    def test_perfect(self):
        x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        y = (x > 0.5).double()
        assert float(segmentation_objective(x, y, x, y, x, x)) == pytest.approx(0.0, abs=1e-6)

    def test_zero_weights(self):
        x = torch.rand(2, 1, 8, 8, dtype=torch.float64)
        w = LossWeights(fm=0.0, rec=0.0, dice=0.0)
        assert float(segmentation_objective(x, x * 0, 1 - x, x, x, x * 0, w)) == 0.0

    def test_additivity(self):
        # components from the examples above: rec 0.5 (labeled), rec 0.25 (unlabeled), dice ~1/3
        lx, lxr = torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 0.0], dtype=torch.float64)
        ux, uxr = torch.tensor([0.2], dtype=torch.float64), torch.tensor([0.7], dtype=torch.float64)
        lp, ly = torch.tensor([1.0, 1.0], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64)
        want = 0.5 + 0.25 + py_dice_loss([1, 1], [1, 0])
        got = float(segmentation_objective(lx, ly, lxr, lp, ux, uxr, LossWeights(1, 1, 1)))
        assert got == pytest.approx(want, abs=1e-6)

    def test_without_unlabeled(self):
        lx, lxr = torch.tensor([1.0, 0.0]), torch.tensor([0.0, 0.0])
        lp = ly = torch.tensor([1.0, 0.0])
        assert float(segmentation_objective(lx, ly, lxr, lp, None, None)) == pytest.approx(0.5, abs=1e-5)


@pytest.mark.parametrize("kw", [{"fm": -1.0}, {"rec": float("nan")}, {"dice": float("inf")}])
def test_weights_validated(kw):
    with pytest.raises(ConfigError):
        LossWeights(**kw)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.sampled_from([0, 1]))
def test_losses_non_negative(a, b, t):
    assert float(bce(a, t)) >= 0
    assert float(discriminator_loss(a, b)) >= 0
    assert float(adversarial_loss(a, b)) >= 0
    assert float(soft_dice_loss([a, b], [t, 1 - t])) >= 0
    assert float(reconstruction_loss([a], [b])) >= 0
