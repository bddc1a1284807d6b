import math

import numpy as np
import pytest
import torch
from scipy.optimize import brentq

from dapsam.config import LossConfig
from dapsam.errors import InvalidInputError
from dapsam.losses import combined_loss, cross_entropy, dice_loss, loss_terms

from .conftest import fd_grad, max_rel_err

EPS = 1e-5


def logits_for(p_fg):
    """K=2 logits whose softmax puts probability ``p_fg`` on label 1."""
    p = torch.as_tensor(p_fg, dtype=torch.float64)
    return torch.stack([torch.zeros_like(p), torch.log(p / (1 - p))], dim=-1)


def oracle_batch():
    """One label-1 pixel with P(1)=p and three label-0 pixels with P(1)=q.

    p and q are solved so that CE = ln(4/3) and the Dice loss (with eps) is
    exactly 0.5: Dice gives q = p - 1/3 + eps/3, then brentq fixes p from CE.
    """
    q_of = lambda p: p - 1 / 3 + EPS / 3
    ce = lambda p: (-math.log(p) - 3 * math.log(1 - q_of(p))) / 4 - math.log(4 / 3)
    p = brentq(ce, 0.34, 0.5, xtol=1e-15)
    probs = [p, q_of(p), q_of(p), q_of(p)]
    return logits_for(probs).reshape(1, 2, 2, 2), torch.tensor([[[1, 0], [0, 0]]])


class TestCrossEntropy:
    def test_uniform(self):
        assert cross_entropy(torch.zeros((2, 3, 3, 2), dtype=torch.float64), torch.ones((2, 3, 3), dtype=torch.long)).item() == pytest.approx(math.log(2), abs=1e-15)

    def test_large_margin(self):
        logits = torch.tensor([[[[0.0, 20.0]]]], dtype=torch.float64)
        assert cross_entropy(logits, torch.tensor([[[1]]])).item() < 1e-8

    def test_hand_softmax(self):
        logits = torch.tensor([[[[0.0, math.log(3)]]]], dtype=torch.float64)
        val = cross_entropy(logits, torch.tensor([[[1]]])).item()
        assert abs(val - math.log(4 / 3)) < 1e-12 and abs(val - 0.287682) < 1e-6

    @pytest.mark.parametrize("bad", [-1, 2])
    def test_label_out_of_range(self, bad):
        with pytest.raises(InvalidInputError):
            cross_entropy(torch.zeros((1, 1, 1, 2)), torch.tensor([[[bad]]]))

    def test_float_target_rejected(self):
        with pytest.raises(InvalidInputError):
            cross_entropy(torch.zeros((1, 1, 1, 2)), torch.zeros((1, 1, 1)))


class TestDice:
    def test_perfect(self):
        t = torch.tensor([[[0, 1], [1, 1]]])
        probs = torch.nn.functional.one_hot(t, 2).double()
        assert dice_loss(probs, t).item() == pytest.approx(0.0, abs=1e-12)

    def test_disjoint(self):
        t = torch.tensor([[[1, 1], [1, 1]]])
        probs = torch.zeros((1, 2, 2, 2), dtype=torch.float64)
        probs[..., 0] = 1
        assert dice_loss(probs, t).item() == pytest.approx(1 - EPS / (4 + EPS), abs=1e-15)

    def test_half_overlap_counts(self):
        # |P| = |G| = 4, overlap 2 -> dice 0.5
        t = torch.zeros((1, 1, 6), dtype=torch.long)
        t[..., :4] = 1
        fg = torch.tensor([0, 0, 1, 1, 1, 1], dtype=torch.float64).reshape(1, 1, 6)
        probs = torch.stack([1 - fg, fg], dim=-1)
        val = dice_loss(probs, t).item()
        assert abs(val - 0.5) < 1e-5 and val == pytest.approx(1 - (4 + EPS) / (8 + EPS), abs=1e-15)

    def test_background_excluded(self):
        t = torch.tensor([[[0, 0], [0, 1]]])
        probs = torch.nn.functional.one_hot(t, 2).double()
        probs[..., 0] = 0.5  # ruins background only
        assert dice_loss(probs, t).item() == pytest.approx(0.0, abs=1e-12)

    def test_batch_pooled(self):
        t = torch.tensor([[[1]], [[0]]])
        probs = torch.tensor([[[[0.0, 1.0]]], [[[0.0, 1.0]]]], dtype=torch.float64)
        # Pooled: 2*1 / (2 + 1); a per-sample mean would differ.
        assert dice_loss(probs, t).item() == pytest.approx(1 - (2 + EPS) / (3 + EPS), abs=1e-15)


class TestCombined:
    def test_lambda_endpoints_exact(self):
        logits, t = oracle_batch()
        assert combined_loss(logits, t, LossConfig(lam=0.0)).item() == cross_entropy(logits, t).item()
        assert combined_loss(logits, t, LossConfig(lam=1.0)).item() == dice_loss(torch.softmax(logits, -1), t).item()

    def test_oracle_batch_components(self):
        logits, t = oracle_batch()
        _, ce, dice = loss_terms(logits, t)
        assert abs(ce.item() - math.log(4 / 3)) < 1e-12
        assert abs(dice.item() - 0.5) < 1e-12

    def test_lambda_08_oracle(self):
        logits, t = oracle_batch()
        assert abs(combined_loss(logits, t, LossConfig(lam=0.8)).item() - 0.457536) < 1e-6

    def test_affine_in_lambda(self, gen):
        logits = torch.randn((2, 4, 4, 3), generator=gen, dtype=torch.float64)
        t = torch.randint(0, 3, (2, 4, 4), generator=gen)
        vals = [combined_loss(logits, t, LossConfig(lam=l)).item() for l in (0.0, 0.5, 1.0)]
        assert abs(vals[1] - 0.5 * (vals[0] + vals[2])) < 1e-10

    def test_invalid_lambda(self):
        with pytest.raises(ValueError):
            LossConfig(lam=1.5)
        with pytest.raises(ValueError):
            LossConfig(dice_epsilon=0)

    def test_gradient(self, gen):
        logits = torch.randn((2, 3, 3, 3), generator=gen, dtype=torch.float64).requires_grad_(True)
        t = torch.randint(0, 3, (2, 3, 3), generator=gen)
        fn = lambda: combined_loss(logits, t)
        (g,) = torch.autograd.grad(fn(), [logits])
        assert max_rel_err(g, fd_grad(fn, logits)) < 1e-4
