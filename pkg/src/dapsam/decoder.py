"""Fully trainable semantic mask decoder.

The dense prompt enters additively through a zero-initialised per-token
affine map, ``e' = e + prompt @ W_f + b_f``, followed by ``decoder_depth``
transformer blocks, a LayerNorm and a per-token linear head to K logits.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .config import EncoderConfig
from .encoder import add_block_params, block_forward, layer_norm, normal_init
from .errors import InvalidInputError
from .params import ParameterStore


def init_decoder(store: ParameterStore, config: EncoderConfig, seed: int, dtype=torch.float64) -> None:
    C, K = config.embed_dim, config.num_labels
    store.add("decoder.fusion.weight", torch.zeros(C, C, dtype=dtype), frozen=False)
    store.add("decoder.fusion.bias", torch.zeros(C, dtype=dtype), frozen=False)
    for j in range(config.decoder_depth):
        add_block_params(store, f"decoder.blocks.{j}", C, config.mlp_ratio, seed, dtype)
    store.add("decoder.norm.weight", torch.ones(C, dtype=dtype), frozen=False)
    store.add("decoder.norm.bias", torch.zeros(C, dtype=dtype), frozen=False)
    store.add("decoder.head.weight", normal_init(seed, "decoder.head.weight", (C, K), C**-0.5, dtype), frozen=False)
    store.add("decoder.head.bias", torch.zeros(K, dtype=dtype), frozen=False)


def decode(e: torch.Tensor, prompt: torch.Tensor | None, params: ParameterStore, config: EncoderConfig) -> torch.Tensor:
    """Fuse embedding and prompt, return token-resolution logits (batch, h, w, K).

    ``prompt=None`` is treated as an all-zero prompt.
    """
    if e.ndim != 4:
        raise InvalidInputError(f"embedding must be (batch, h, w, C), got {tuple(e.shape)}")
    if prompt is None:
        prompt = torch.zeros_like(e)
    elif prompt.shape != e.shape:
        raise InvalidInputError(f"prompt shape {tuple(prompt.shape)} != embedding shape {tuple(e.shape)}")
    x = e + (prompt @ params["decoder.fusion.weight"] + params["decoder.fusion.bias"])
    for j in range(config.decoder_depth):
        x = block_forward(x, params, f"decoder.blocks.{j}", config.num_heads)
    x = layer_norm(x, params, "decoder.norm")
    return x @ params["decoder.head.weight"] + params["decoder.head.bias"]


def upsample_logits(logits: torch.Tensor, H: int, W: int) -> torch.Tensor:
    """Corner-aligned bilinear resize of (batch, h, w, K) logits to (batch, H, W, K)."""
    if int(H) <= 0 or int(W) <= 0:
        raise InvalidInputError(f"target size must be positive, got {H}x{W}")
    if logits.ndim != 4:
        raise InvalidInputError(f"logits must be (batch, h, w, K), got {tuple(logits.shape)}")
    if logits.shape[1:3] == (H, W):
        return logits
    chw = logits.permute(0, 3, 1, 2)
    out = F.interpolate(chw, size=(int(H), int(W)), mode="bilinear", align_corners=True)
    return out.permute(0, 2, 3, 1)


def predict_mask(logits) -> np.ndarray:
    """Per-pixel argmax over the last axis; ties go to the smaller label."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    # np.argmax returns the first maximal index, which is the documented tie-break.
    return np.argmax(np.asarray(logits), axis=-1)
