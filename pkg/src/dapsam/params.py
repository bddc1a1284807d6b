"""Named parameter storage with frozen/trainable flags."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch

from .errors import InvalidInputError, InventoryError

# Namespace rules, first match wins. True means frozen.
_PARTITION_RULES = (
    (re.compile(r"^encoder\.blocks\.\d+\.adapter_(attn|mlp)\.(down|up)_(weight|bias)$"), False),
    (re.compile(r"^encoder\.low_level\.(weight|bias)$"), False),
    (re.compile(r"^encoder\.(patch_embed\.(weight|bias)|pos_embed|norm\.(weight|bias))$"), True),
    (re.compile(r"^encoder\.blocks\.\d+\.(norm[12]|attn\.(qkv|proj)|mlp\.fc[12])\.(weight|bias)$"), True),
    (re.compile(r"^prompt\.(bank|conv\.weight|conv\.bias)$"), False),
    (re.compile(r"^decoder\."), False),
)


def is_frozen_name(name: str) -> bool:
    """Return the frozen flag the architecture assigns to ``name``."""
    for pattern, frozen in _PARTITION_RULES:
        if pattern.match(name):
            return frozen
    raise InventoryError(f"unknown parameter name {name!r}")


def seed_for(seed: int, *parts) -> int:
    """Derive a 63-bit seed from ``seed`` and any labels; stable across runs and platforms."""
    text = "\x1f".join([str(int(seed))] + [str(p) for p in parts])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


@dataclass
class Entry:
    tensor: torch.Tensor
    frozen: bool

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.tensor.shape)

    @property
    def dtype(self) -> torch.dtype:
        return self.tensor.dtype


class ParameterStore:
    """Ordered mapping of parameter name to tensor plus frozen flag.

    Trainable tensors carry ``requires_grad=True``; frozen ones never do, so
    autograd cannot route updates into them.
    """

    def __init__(self):
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, value, frozen: bool) -> torch.Tensor:
        if name in self._entries:
            raise InvalidInputError(f"duplicate parameter name {name!r}")
        tensor = torch.as_tensor(value).detach().clone()
        if not torch.isfinite(tensor).all():
            raise InvalidInputError(f"parameter {name!r} has non-finite entries")
        tensor.requires_grad_(not frozen and tensor.is_floating_point())
        self._entries[name] = Entry(tensor, bool(frozen))
        return tensor

    def __getitem__(self, name: str) -> torch.Tensor:
        try:
            return self._entries[name].tensor
        except KeyError:
            raise InventoryError(f"parameter {name!r} not in store") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def entry(self, name: str) -> Entry:
        if name not in self._entries:
            raise InventoryError(f"parameter {name!r} not in store")
        return self._entries[name]

    def items(self):
        return ((k, e.tensor) for k, e in self._entries.items())

    def is_frozen(self, name: str) -> bool:
        return self.entry(name).frozen

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self._entries if k.startswith(prefix)]

    def trainable(self) -> list[str]:
        return [k for k, e in self._entries.items() if not e.frozen]

    def frozen(self) -> list[str]:
        return [k for k, e in self._entries.items() if e.frozen]

    def count(self, names=None) -> int:
        names = self._entries if names is None else names
        return sum(self._entries[n].tensor.numel() for n in names)

    def set(self, name: str, value) -> None:
        """Overwrite the values of an existing parameter in place (shape must match)."""
        entry = self.entry(name)
        value = torch.as_tensor(value, dtype=entry.dtype)
        if tuple(value.shape) != entry.shape:
            raise InvalidInputError(f"parameter {name!r}: shape {tuple(value.shape)} != expected {entry.shape}")
        with torch.no_grad():
            entry.tensor.copy_(value)

    def snapshot(self, names=None) -> dict[str, np.ndarray]:
        names = self._entries if names is None else names
        return {n: self._entries[n].tensor.detach().cpu().numpy().copy() for n in names}

    def to(self, dtype: torch.dtype) -> ParameterStore:
        out = ParameterStore()
        for name, e in self._entries.items():
            out.add(name, e.tensor.detach().to(dtype), e.frozen)
        return out

    def subset(self, prefix: str) -> ParameterStore:
        out = ParameterStore()
        for name in self.names(prefix):
            e = self._entries[name]
            out.add(name, e.tensor.detach(), e.frozen)
        return out


def partition_parameters(params: ParameterStore) -> tuple[list[str], list[str]]:
    """Split store names into (frozen, trainable) by architecture namespace.

    Raises InventoryError for names outside the known namespaces, and when a
    stored frozen flag disagrees with the namespace rule.
    """
    frozen, trainable = [], []
    for name in params:
        want = is_frozen_name(name)
        if params.is_frozen(name) != want:
            raise InventoryError(f"parameter {name!r} stored with frozen={params.is_frozen(name)}, expected {want}")
        (frozen if want else trainable).append(name)
    return frozen, trainable
