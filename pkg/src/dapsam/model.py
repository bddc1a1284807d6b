"""Full model assembly: encoder -> (prompt generator) -> decoder."""
from __future__ import annotations

import torch

from .config import EncoderConfig, TrainConfig
from .decoder import decode, init_decoder, upsample_logits
from .encoder import encoder_forward, init_encoder
from .params import ParameterStore, partition_parameters
from .prompt import init_prompt_params, prompt_forward


def init_model(encoder: EncoderConfig, train: TrainConfig, dtype=torch.float64) -> ParameterStore:
    """Fresh parameters for the toggled architecture.

    Each array is seeded from ``(train.seed, name)``, so the frozen backbone and
    any shared modules are identical across ablation variants.
    """
    store = ParameterStore()
    init_encoder(store, encoder, train.seed, low_level=train.toggles.low_level_fusion, dtype=dtype)
    if train.use_prompt:
        init_prompt_params(store, encoder.embed_dim, train.bank_size, train.seed, dtype)
    init_decoder(store, encoder, train.seed, dtype)
    partition_parameters(store)
    return store


def forward_tokens(images, params: ParameterStore, encoder: EncoderConfig, train: TrainConfig) -> torch.Tensor:
    """Images (batch, H, W, channels) -> token-grid logits (batch, h, w, K)."""
    t = train.toggles
    e = encoder_forward(images, params, encoder, use_fusion=t.low_level_fusion, use_filter=t.channel_filter)
    prompt = prompt_forward(e, params) if train.use_prompt else None
    return decode(e, prompt, params, encoder)


def forward(images, params: ParameterStore, encoder: EncoderConfig, train: TrainConfig) -> torch.Tensor:
    """Images -> full-resolution logits (batch, H, W, K)."""
    logits = forward_tokens(images, params, encoder, train)
    return upsample_logits(logits, encoder.image_size, encoder.image_size)


def bank_parameter_count(params: ParameterStore) -> int:
    return params["prompt.bank"].numel() if "prompt.bank" in params else 0
