"""Central finite-difference check of autograd gradients, per component."""
from __future__ import annotations

from typing import Callable

import torch

from .adapter import AdapterParams, adapter_forward, channel_filter
from .config import EncoderConfig, LossConfig, Toggles, TrainConfig
from .decoder import decode, init_decoder
from .encoder import encoder_forward, init_encoder
from .errors import InventoryError
from .losses import combined_loss
from .params import ParameterStore
from .prompt import init_prompt_params, prompt_forward

COMPONENTS = ("adapter", "filter", "prompt", "decoder", "loss", "encoder")
FD_STEP = 1e-6
DTYPE = torch.float64

# Deliberately small shapes: every scalar of every parameter is perturbed.
_CFG = EncoderConfig(image_size=16, patch_size=4, embed_dim=16, depth=1, num_heads=2, adapter_rank=4, num_labels=3)


def finite_difference(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, step: float = FD_STEP) -> torch.Tensor:
    """d fn / d tensor by central differences, perturbing ``tensor`` in place."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """||a - n|| / max(||a||, ||n||); 0 when both vanish."""
    scale = max(analytic.norm().item(), numeric.norm().item())
    return 0.0 if scale == 0 else (analytic - numeric).norm().item() / scale


def check(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor], step: float = FD_STEP) -> dict[str, float]:
    """Relative error per named tensor between autograd and finite differences."""
    leaves = list(tensors.values())
    for t in leaves:
        t.requires_grad_(True)
    grads = torch.autograd.grad(fn(), leaves)
    return {name: relative_error(g, finite_difference(fn, t, step)) for (name, t), g in zip(tensors.items(), grads)}


def _probe(gen, shape):
    return torch.randn(shape, generator=gen, dtype=DTYPE)


def _objective(out: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    # Random linear functional; a plain sum can make some gradients vanish identically.
    return (out * weights).sum()


def component_problem(component: str, seed: int):
    """(objective, {name: tensor}) for one component at toy shapes."""
    gen = torch.Generator().manual_seed(seed)
    C, r, K = _CFG.embed_dim, _CFG.adapter_rank, _CFG.num_labels
    fmap = (2, 4, 4, C)

    if component == "adapter":
        feat, low, R = _probe(gen, fmap), _probe(gen, fmap), _probe(gen, fmap)
        p = AdapterParams(_probe(gen, (C, r)) * 0.5, _probe(gen, (r,)), _probe(gen, (r, C)) * 0.5, _probe(gen, (C,)))
        tensors = {"down_weight": p.down_weight, "down_bias": p.down_bias, "up_weight": p.up_weight, "up_bias": p.up_bias}
        return (lambda: _objective(adapter_forward(feat, low, p), R)), tensors

    if component == "filter":
        x, R = _probe(gen, fmap), _probe(gen, fmap)
        return (lambda: _objective(channel_filter(x), R)), {"input": x}

    if component == "prompt":
        store = ParameterStore()
        init_prompt_params(store, C, 8, seed)
        store.set("prompt.conv.bias", _probe(gen, (C,)) * 0.1)
        e, R = _probe(gen, fmap), _probe(gen, fmap)
        tensors = {n: store[n] for n in ("prompt.bank", "prompt.conv.weight", "prompt.conv.bias")}
        return (lambda: _objective(prompt_forward(e, store), R)), tensors

    if component == "decoder":
        store = ParameterStore()
        init_decoder(store, _CFG, seed)
        # Zero-initialised fusion would hide the prompt path from the check.
        store.set("decoder.fusion.weight", _probe(gen, (C, C)) * 0.25)
        store.set("decoder.fusion.bias", _probe(gen, (C,)) * 0.1)
        e, prompt, R = _probe(gen, fmap), _probe(gen, fmap), _probe(gen, fmap[:-1] + (K,))
        return (lambda: _objective(decode(e, prompt, store, _CFG), R)), {n: store[n] for n in store}

    if component == "loss":
        logits = _probe(gen, (2, 4, 4, K))
        target = torch.randint(0, K, (2, 4, 4), generator=gen)
        return (lambda: combined_loss(logits, target, LossConfig())), {"logits": logits}

    if component == "encoder":
        store = ParameterStore()
        init_encoder(store, _CFG, seed)
        for name in store.trainable():
            store.set(name, _probe(gen, store.entry(name).shape) * 0.2)
        image = torch.rand((2, _CFG.image_size, _CFG.image_size, 1), generator=gen, dtype=DTYPE)
        R = _probe(gen, (2, _CFG.grid, _CFG.grid, C))
        return (lambda: _objective(encoder_forward(image, store, _CFG), R)), {n: store[n] for n in store.trainable()}

    raise InventoryError(f"unknown gradcheck component {component!r}; choose from {COMPONENTS}")


def gradcheck(component: str, seed: int = 0, step: float = FD_STEP) -> float:
    """Max relative error between autograd and central differences over the component's parameters."""
    fn, tensors = component_problem(component, seed)
    return max(check(fn, tensors, step).values())
