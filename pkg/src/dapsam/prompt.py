"""Prototype-based prompt generator backed by a learnable memory bank.

Pipeline for an embedding ``e`` of shape (batch, h, w, C)::

    p     = GAP(e) + GMP(e)                      # instance prototype, (batch, C)
    w     = softmax_j cos(p, M_j)                # bank addressing, (batch, N)
    p_hat = w @ M                                # adapted prototype, (batch, C)
    A     = cos(broadcast(p_hat), e)             # activation map, (batch, h, w)
    prompt = [p_hat, A, e] @ W + b               # 1x1 conv, 2C+1 -> C channels

Every similarity has a strict form that raises on zero-norm vectors and a
guarded form (denominators clamped at 1e-12) used during training.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DegenerateSimilarityError, InvalidInputError, InventoryError
from .params import ParameterStore

NORM_FLOOR = 1e-12


@dataclass
class PromptParams:
    conv_weight: torch.Tensor  # (2C+1) x C
    conv_bias: torch.Tensor  # C

    @classmethod
    def from_store(cls, store: ParameterStore) -> PromptParams:
        return cls(store["prompt.conv.weight"], store["prompt.conv.bias"])


def init_prompt_params(store: ParameterStore, channels: int, bank_size: int, seed: int, dtype=torch.float64) -> None:
    from .encoder import normal_init

    if bank_size < 1:
        raise InvalidInputError("memory bank needs at least one row")
    bank = normal_init(seed, "prompt.bank", (bank_size, channels), channels**-0.5, dtype)
    # Zero rows would leave cosine undefined; vanishingly unlikely but cheap to rule out.
    if (bank.norm(dim=1) == 0).any():
        raise InvalidInputError("memory bank initialised with a zero row")
    store.add("prompt.bank", bank, frozen=False)
    fan_in = 2 * channels + 1
    store.add("prompt.conv.weight", normal_init(seed, "prompt.conv.weight", (fan_in, channels), fan_in**-0.5, dtype), frozen=False)
    store.add("prompt.conv.bias", torch.zeros(channels, dtype=dtype), frozen=False)


def _norms(x: torch.Tensor, strict: bool, what: str) -> torch.Tensor:
    n = torch.linalg.vector_norm(x, dim=-1, keepdim=True)
    if strict:
        if (n == 0).any():
            raise DegenerateSimilarityError(f"{what} has zero norm; cosine similarity undefined")
        return n
    return n.clamp_min(NORM_FLOOR)


def extract_prototype(e: torch.Tensor) -> torch.Tensor:
    if e.ndim != 4:
        raise InvalidInputError(f"embedding must be (batch, h, w, C), got {tuple(e.shape)}")
    return e.mean(dim=(1, 2)) + e.amax(dim=(1, 2))


def memory_weights(p: torch.Tensor, bank: torch.Tensor, *, strict: bool = True) -> torch.Tensor:
    """Softmax over bank rows of the cosine similarity to ``p``.

    ``p`` is (C,) or (batch, C); the result is (N,) or (batch, N).
    """
    p = torch.as_tensor(p, dtype=bank.dtype)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise InventoryError("memory bank must be a non-empty N x C matrix")
    if p.shape[-1] != bank.shape[1]:
        raise InvalidInputError(f"prototype width {p.shape[-1]} != bank width {bank.shape[1]}")
    order = canonical_row_order(bank)
    return _sorted_weights(p, bank[order], strict)[..., torch.argsort(order)]


def canonical_row_order(bank: torch.Tensor) -> torch.Tensor:
    """Lexicographic row order of ``bank`` (first column most significant).

    Reductions over bank rows run in this order, so permuting the rows
    permutes the weights and leaves ``p_hat`` bit-identical.
    """
    keys = bank.detach().cpu().numpy()
    return torch.from_numpy(np.lexsort(keys.T[::-1]).astype(np.int64)).to(bank.device)


def _sorted_weights(p: torch.Tensor, bank: torch.Tensor, strict: bool) -> torch.Tensor:
    p_unit = p / _norms(p, strict, "prototype")
    m_unit = bank / _norms(bank, strict, "memory bank row")
    return torch.softmax(p_unit @ m_unit.T, dim=-1)


def adapt_prototype(p: torch.Tensor, bank: torch.Tensor, *, strict: bool = True) -> torch.Tensor:
    """Convex combination of bank rows weighted by :func:`memory_weights`."""
    p = torch.as_tensor(p, dtype=bank.dtype)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise InventoryError("memory bank must be a non-empty N x C matrix")
    if p.shape[-1] != bank.shape[1]:
        raise InvalidInputError(f"prototype width {p.shape[-1]} != bank width {bank.shape[1]}")
    ordered = bank[canonical_row_order(bank)]
    return _sorted_weights(p, ordered, strict) @ ordered


def activation_map(p_hat: torch.Tensor, e: torch.Tensor, *, strict: bool = True) -> torch.Tensor:
    """Cosine similarity between ``p_hat`` and each token of ``e``; (batch, h, w).

    Tokens that are exactly zero map to 0 on both paths.
    """
    if e.ndim != 4 or p_hat.shape != (e.shape[0], e.shape[-1]):
        raise InvalidInputError(f"activation_map: p_hat {tuple(p_hat.shape)} incompatible with embedding {tuple(e.shape)}")
    p_unit = p_hat / _norms(p_hat, strict, "adapted prototype")
    e_norm = torch.linalg.vector_norm(e, dim=-1)
    dots = (e * p_unit[:, None, None, :]).sum(-1)
    cos = dots / e_norm.clamp_min(NORM_FLOOR)
    return cos.clamp(-1.0, 1.0)


def generate_prompt(p_hat: torch.Tensor, A: torch.Tensor, e: torch.Tensor, params: PromptParams) -> torch.Tensor:
    B, h, w, C = e.shape
    if p_hat.shape != (B, C) or A.shape != (B, h, w):
        raise InvalidInputError(
            f"generate_prompt: p_hat {tuple(p_hat.shape)}, A {tuple(A.shape)} incompatible with embedding {tuple(e.shape)}"
        )
    if params.conv_weight.shape[0] != 2 * C + 1:
        raise InvalidInputError(f"prompt conv expects {params.conv_weight.shape[0]} input channels, got {2 * C + 1}")
    stacked = torch.cat([p_hat[:, None, None, :].expand(B, h, w, C), A[..., None], e], dim=-1)
    return stacked @ params.conv_weight + params.conv_bias


def prompt_forward(e: torch.Tensor, params: ParameterStore, *, strict: bool = False) -> torch.Tensor:
    """Embedding -> dense domain-adaptive prompt, same shape as ``e``."""
    bank = params["prompt.bank"]
    p_hat = adapt_prototype(extract_prototype(e), bank, strict=strict)
    A = activation_map(p_hat, e, strict=strict)
    return generate_prompt(p_hat, A, e, PromptParams.from_store(params))


def export_prototypes(bank, embeddings=(), path: str | Path | None = None) -> str:
    """Dump bank rows plus raw/adapted prototypes of ``embeddings`` as CSV.

    Each embedding is (h, w, C) or (batch, h, w, C); every sample contributes
    one ``raw`` and one ``adapted`` row. Returns the CSV text and writes it to
    ``path`` when given.
    """
    bank = torch.as_tensor(bank)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise InventoryError("cannot export an empty memory bank")
    C = bank.shape[1]
    rows = [("bank", i, row) for i, row in enumerate(bank.detach().cpu().numpy())]
    raw, adapted = [], []
    with torch.no_grad():
        for emb in embeddings:
            emb = torch.as_tensor(emb, dtype=bank.dtype)
            if emb.ndim == 3:
                emb = emb[None]
            p = extract_prototype(emb)
            raw.extend(p.numpy())
            adapted.extend(adapt_prototype(p, bank).numpy())
    rows += [("raw", i, v) for i, v in enumerate(raw)]
    rows += [("adapted", i, v) for i, v in enumerate(adapted)]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["kind", "index"] + [f"c{j}" for j in range(C)])
    for kind, idx, vec in rows:
        writer.writerow([kind, idx] + [f"{float(v):.9g}" for v in vec])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_prototypes(source: str | Path) -> dict[str, np.ndarray]:
    """Parse an export back into ``{kind: (rows, C) array}`` ordered by index."""
    text = Path(source).read_text() if isinstance(source, Path) or "\n" not in str(source) else str(source)
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:2] != ["kind", "index"]:
        raise InvalidInputError("not a prototype export: bad header")
    grouped: dict[str, list[tuple[int, list[float]]]] = {}
    for row in reader:
        grouped.setdefault(row[0], []).append((int(row[1]), [float(v) for v in row[2:]]))
    return {k: np.array([v for _, v in sorted(items)]) for k, items in grouped.items()}
