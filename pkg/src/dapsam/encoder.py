"""ViT-style image encoder with a frozen core and per-block adapters.

Block layout (pre-norm)::

    x = x + attn(norm1(x));  x = adapter_attn(x, F_low)
    x = x + mlp(norm2(x));   x = adapter_mlp(x, F_low)

``F_low`` is computed once from the patch embedding and shared by every
adapter. The core (patch embedding, positional embedding, norms, attention,
MLP) is frozen; adapters and the low-level projection are trainable.
"""
from __future__ import annotations

from collections.abc import Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .adapter import AdapterParams, adapter_forward
from .config import EncoderConfig
from .errors import InvalidInputError, InventoryError, NumericFailureError
from .params import ParameterStore, is_frozen_name, seed_for

LN_EPS = 1e-6
ADAPTER_SLOTS = ("adapter_attn", "adapter_mlp")


def normal_init(seed: int, name: str, shape, std: float, dtype=torch.float64) -> torch.Tensor:
    gen = torch.Generator().manual_seed(seed_for(seed, name))
    return torch.randn(tuple(shape), generator=gen, dtype=torch.float64).mul_(std).to(dtype)


def _add(store, name, value):
    store.add(name, value, frozen=is_frozen_name(name))


def add_block_params(store: ParameterStore, prefix: str, dim: int, mlp_ratio: int, seed: int, dtype) -> None:
    """Transformer block weights (pre-norm MHSA + MLP); linear weights stored as (in, out)."""
    hidden = dim * mlp_ratio
    for ln in ("norm1", "norm2"):
        _add(store, f"{prefix}.{ln}.weight", torch.ones(dim, dtype=dtype))
        _add(store, f"{prefix}.{ln}.bias", torch.zeros(dim, dtype=dtype))
    for name, fan_in, fan_out in (
        ("attn.qkv", dim, 3 * dim),
        ("attn.proj", dim, dim),
        ("mlp.fc1", dim, hidden),
        ("mlp.fc2", hidden, dim),
    ):
        w = f"{prefix}.{name}.weight"
        _add(store, w, normal_init(seed, w, (fan_in, fan_out), fan_in**-0.5, dtype))
        _add(store, f"{prefix}.{name}.bias", torch.zeros(fan_out, dtype=dtype))


def init_encoder(store: ParameterStore, config: EncoderConfig, seed: int, *, adapters: bool = True,
                 low_level: bool = True, dtype=torch.float64) -> None:
    C, r, P = config.embed_dim, config.adapter_rank, config.patch_size
    patch_in = P * P * config.in_channels
    _add(store, "encoder.patch_embed.weight", normal_init(seed, "encoder.patch_embed.weight", (patch_in, C), patch_in**-0.5, dtype))
    _add(store, "encoder.patch_embed.bias", normal_init(seed, "encoder.patch_embed.bias", (C,), 0.02, dtype))
    _add(store, "encoder.pos_embed", torch.zeros(config.grid, config.grid, C, dtype=dtype))
    for i in range(config.depth):
        prefix = f"encoder.blocks.{i}"
        add_block_params(store, prefix, C, config.mlp_ratio, seed, dtype)
        if adapters:
            for slot in ADAPTER_SLOTS:
                a = f"{prefix}.{slot}"
                _add(store, f"{a}.down_weight", normal_init(seed, f"{a}.down_weight", (C, r), 0.02, dtype))
                _add(store, f"{a}.down_bias", torch.zeros(r, dtype=dtype))
                _add(store, f"{a}.up_weight", torch.zeros(r, C, dtype=dtype))
                _add(store, f"{a}.up_bias", torch.zeros(C, dtype=dtype))
    _add(store, "encoder.norm.weight", torch.ones(C, dtype=dtype))
    _add(store, "encoder.norm.bias", torch.zeros(C, dtype=dtype))
    if low_level:
        _add(store, "encoder.low_level.weight", normal_init(seed, "encoder.low_level.weight", (C, C), C**-0.5, dtype))
        _add(store, "encoder.low_level.bias", torch.zeros(C, dtype=dtype))


def trainable_count(config: EncoderConfig, *, low_level: bool = True) -> int:
    """Closed-form trainable parameter count contributed by the encoder."""
    C, r = config.embed_dim, config.adapter_rank
    per_adapter = C * r + r + r * C + C
    return config.depth * 2 * per_adapter + (C * C + C if low_level else 0)


def _as_input(image, params: ParameterStore) -> torch.Tensor:
    ref = params["encoder.patch_embed.weight"]
    return torch.as_tensor(image, dtype=ref.dtype)


def patch_embed(image, params: ParameterStore, config: EncoderConfig) -> torch.Tensor:
    """Split into non-overlapping patches, project linearly, add positional embedding."""
    x = _as_input(image, params)
    if x.ndim != 4:
        raise InvalidInputError(f"image must be (batch, H, W, channels), got shape {tuple(x.shape)}")
    B, H, W, Cin = x.shape
    for axis, (got, want) in enumerate(((H, config.image_size), (W, config.image_size), (Cin, config.in_channels)), 1):
        if got != want:
            raise InvalidInputError(f"image axis {axis} has size {got}, expected {want}")
    P, g = config.patch_size, config.grid
    patches = x.reshape(B, g, P, g, P, Cin).permute(0, 1, 3, 2, 4, 5).reshape(B, g, g, P * P * Cin)
    return patches @ params["encoder.patch_embed.weight"] + params["encoder.patch_embed.bias"] + params["encoder.pos_embed"]


def low_level_project(e0: torch.Tensor, params: ParameterStore) -> torch.Tensor:
    w = params["encoder.low_level.weight"]
    if e0.ndim != 4 or e0.shape[-1] != w.shape[0]:
        raise InvalidInputError(f"low_level_project: expected (batch, h, w, {w.shape[0]}), got {tuple(e0.shape)}")
    return e0 @ w + params["encoder.low_level.bias"]


def layer_norm(x: torch.Tensor, params: ParameterStore, prefix: str) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), params[f"{prefix}.weight"], params[f"{prefix}.bias"], LN_EPS)


def attention(x: torch.Tensor, params: ParameterStore, prefix: str, num_heads: int) -> torch.Tensor:
    """Global multi-head self-attention over the token grid."""
    B, h, w, C = x.shape
    d = C // num_heads
    tokens = x.reshape(B, h * w, C)
    qkv = tokens @ params[f"{prefix}.qkv.weight"] + params[f"{prefix}.qkv.bias"]
    q, k, v = qkv.reshape(B, h * w, 3, num_heads, d).permute(2, 0, 3, 1, 4)
    weights = torch.softmax((q @ k.transpose(-2, -1)) * d**-0.5, dim=-1)
    out = (weights @ v).transpose(1, 2).reshape(B, h * w, C)
    out = out @ params[f"{prefix}.proj.weight"] + params[f"{prefix}.proj.bias"]
    return out.reshape(B, h, w, C)


def mlp(x: torch.Tensor, params: ParameterStore, prefix: str) -> torch.Tensor:
    hidden = F.gelu(x @ params[f"{prefix}.fc1.weight"] + params[f"{prefix}.fc1.bias"])
    return hidden @ params[f"{prefix}.fc2.weight"] + params[f"{prefix}.fc2.bias"]


def block_forward(x, params: ParameterStore, prefix: str, num_heads: int, adapt=None) -> torch.Tensor:
    x = x + attention(layer_norm(x, params, f"{prefix}.norm1"), params, f"{prefix}.attn", num_heads)
    if adapt is not None:
        x = adapt(x, f"{prefix}.adapter_attn")
    x = x + mlp(layer_norm(x, params, f"{prefix}.norm2"), params, f"{prefix}.mlp")
    if adapt is not None:
        x = adapt(x, f"{prefix}.adapter_mlp")
    return x


def encoder_forward(
    image,
    params: ParameterStore,
    config: EncoderConfig,
    *,
    adapters: bool = True,
    use_fusion: bool = True,
    use_filter: bool = True,
) -> torch.Tensor:
    """Image (batch, H, W, channels) -> final embedding (batch, h, w, C).

    ``adapters=False`` evaluates the frozen backbone alone.
    """
    e0 = patch_embed(image, params, config)
    adapt = None
    if adapters:
        low = low_level_project(e0, params) if use_fusion else None

        def adapt(x, prefix):
            return adapter_forward(x, low, AdapterParams.from_store(params, prefix),
                                   use_fusion=use_fusion, use_filter=use_filter)

    x = e0
    for i in range(config.depth):
        try:
            x = block_forward(x, params, f"encoder.blocks.{i}", config.num_heads, adapt)
        except NumericFailureError as exc:
            raise NumericFailureError(f"non-finite activation in encoder block {i}: {exc}") from exc
        if not torch.isfinite(x).all():
            raise NumericFailureError(f"non-finite activation in encoder block {i}")
    return layer_norm(x, params, "encoder.norm")


def frozen_backbone_forward(image, params: ParameterStore, config: EncoderConfig) -> torch.Tensor:
    return encoder_forward(image, params, config, adapters=False)


def load_pretrained_encoder(params: ParameterStore, arrays: Mapping[str, np.ndarray],
                            name_map: Mapping[str, str] | None = None) -> list[str]:
    """Copy external weights into the frozen encoder core.

    ``name_map`` maps external names to store names (identity when omitted).
    Shapes must match exactly; positional embeddings are never interpolated.
    Returns the store names that were overwritten.
    """
    name_map = dict(name_map) if name_map is not None else {k: k for k in arrays}
    loaded = []
    for src, dst in name_map.items():
        if src not in arrays:
            raise InventoryError(f"external checkpoint lacks {src!r}")
        if dst not in params:
            raise InventoryError(f"no encoder parameter named {dst!r}")
        if not params.is_frozen(dst) or not dst.startswith("encoder."):
            raise InvalidInputError(f"{dst!r} is not part of the frozen encoder core")
        value = np.asarray(arrays[src])
        if tuple(value.shape) != params.entry(dst).shape:
            raise InvalidInputError(f"parameter {dst!r}: checkpoint shape {tuple(value.shape)} != {params.entry(dst).shape}")
        params.set(dst, torch.from_numpy(value.copy()))
        loaded.append(dst)
    return loaded
