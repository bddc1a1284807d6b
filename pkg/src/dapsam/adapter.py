"""Generalized adapter: low-level fusion, channel filtering, bottleneck residual.

All feature maps are channels-last tensors of shape ``(batch, h, w, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidInputError, NumericFailureError
from .params import ParameterStore

ADAPTER_KEYS = ("down_weight", "down_bias", "up_weight", "up_bias")


@dataclass
class AdapterParams:
    down_weight: torch.Tensor  # C x r
    down_bias: torch.Tensor  # r
    up_weight: torch.Tensor  # r x C
    up_bias: torch.Tensor  # C

    def __post_init__(self):
        C, r = self.down_weight.shape
        if tuple(self.down_bias.shape) != (r,) or tuple(self.up_weight.shape) != (r, C) or tuple(self.up_bias.shape) != (C,):
            raise InvalidInputError(
                f"inconsistent adapter shapes: down {tuple(self.down_weight.shape)}, "
                f"down_bias {tuple(self.down_bias.shape)}, up {tuple(self.up_weight.shape)}, up_bias {tuple(self.up_bias.shape)}"
            )

    @property
    def rank(self) -> int:
        return self.down_weight.shape[1]

    @classmethod
    def from_store(cls, store: ParameterStore, prefix: str) -> AdapterParams:
        return cls(*(store[f"{prefix}.{k}"] for k in ADAPTER_KEYS))


def _check_feature_map(x: torch.Tensor, what: str) -> None:
    if x.ndim != 4:
        raise InvalidInputError(f"{what} must be (batch, h, w, C), got shape {tuple(x.shape)}")


def fuse_low_level(feat: torch.Tensor, low: torch.Tensor) -> torch.Tensor:
    """Mix the shared low-level projection into an intermediate feature by addition."""
    if feat.shape != low.shape:
        raise InvalidInputError(f"fuse_low_level: shape {tuple(feat.shape)} != low-level shape {tuple(low.shape)}")
    return feat + low


def channel_mask(fused: torch.Tensor) -> torch.Tensor:
    """Per-sample, per-channel gate sigmoid(GAP + GMP); shape (batch, 1, 1, C)."""
    _check_feature_map(fused, "channel_filter input")
    gap = fused.mean(dim=(1, 2), keepdim=True)
    gmp = fused.amax(dim=(1, 2), keepdim=True)
    return torch.sigmoid(gap + gmp)


def channel_filter(fused: torch.Tensor) -> torch.Tensor:
    """Parameter-free channel attention filter.

    Pools each channel over the token grid (average plus max), squashes the
    sum through a sigmoid and rescales the channel by it. Spatial positions are
    never mixed.
    """
    if not torch.isfinite(fused).all():
        raise NumericFailureError("channel_filter: input contains non-finite values")
    return fused * channel_mask(fused)


def adapter_forward(
    feat: torch.Tensor,
    low: torch.Tensor | None,
    params: AdapterParams,
    *,
    use_fusion: bool = True,
    use_filter: bool = True,
) -> torch.Tensor:
    """F' = F + up(GELU(down(filter(F + F_low)))).

    ``use_fusion`` / ``use_filter`` switch off the low-level fusion and the
    channel filter (ablation baseline); with both off this is a plain
    bottleneck adapter.
    """
    _check_feature_map(feat, "adapter input")
    if feat.shape[-1] != params.down_weight.shape[0]:
        raise InvalidInputError(f"adapter: channel count {feat.shape[-1]} != adapter width {params.down_weight.shape[0]}")
    x = feat
    if use_fusion:
        if low is None:
            raise InvalidInputError("adapter: low-level fusion enabled but no low-level features given")
        x = fuse_low_level(x, low)
    if use_filter:
        x = channel_filter(x)
    hidden = F.gelu(x @ params.down_weight + params.down_bias)
    out = feat + (hidden @ params.up_weight + params.up_bias)
    if not torch.isfinite(out).all():
        raise NumericFailureError("adapter produced non-finite output")
    return out
