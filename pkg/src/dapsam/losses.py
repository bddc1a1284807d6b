"""Training objective: (1 - lambda) * cross-entropy + lambda * Dice loss."""
from __future__ import annotations

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import InvalidInputError


def _targets(target, num_labels: int, spatial_shape) -> torch.Tensor:
    t = torch.as_tensor(target)
    if t.is_floating_point():
        raise InvalidInputError("target label map must be integer-typed")
    t = t.long()
    if tuple(t.shape) != tuple(spatial_shape):
        raise InvalidInputError(f"target shape {tuple(t.shape)} != logits spatial shape {tuple(spatial_shape)}")
    if t.numel() and (t.min() < 0 or t.max() >= num_labels):
        raise InvalidInputError(f"target labels must lie in [0, {num_labels}), found [{int(t.min())}, {int(t.max())}]")
    return t


def cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """Mean over pixels of -log softmax(logits)[true label]."""
    K = logits.shape[-1]
    t = _targets(target, K, logits.shape[:-1])
    logp = F.log_softmax(logits, dim=-1)
    return -logp.gather(-1, t[..., None]).mean()


def dice_loss(probs: torch.Tensor, target, config: LossConfig = LossConfig()) -> torch.Tensor:
    """1 - mean over foreground labels of (2 sum(p*g) + eps) / (sum(p) + sum(g) + eps).

    Sums run over every pixel of every sample in the batch.
    """
    K = probs.shape[-1]
    t = _targets(target, K, probs.shape[:-1])
    onehot = F.one_hot(t, K).to(probs.dtype)
    dims = tuple(range(probs.ndim - 1))
    inter = (probs * onehot).sum(dims)[1:]
    denom = probs.sum(dims)[1:] + onehot.sum(dims)[1:]
    eps = config.dice_epsilon
    return 1.0 - ((2.0 * inter + eps) / (denom + eps)).mean()


def loss_terms(logits: torch.Tensor, target, config: LossConfig = LossConfig()):
    """Return (combined, cross_entropy, dice) for one batch."""
    ce = cross_entropy(logits, target)
    dice = dice_loss(torch.softmax(logits, dim=-1), target, config)
    return (1.0 - config.lam) * ce + config.lam * dice, ce, dice


def combined_loss(logits: torch.Tensor, target, config: LossConfig = LossConfig()) -> torch.Tensor:
    return loss_terms(logits, target, config)[0]
