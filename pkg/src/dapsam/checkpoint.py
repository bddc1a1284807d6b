"""Checkpoint container: a zip of raw little-endian arrays plus a JSON manifest.

Layout::

    manifest.json          names, shapes, dtypes, frozen flags, optimizer
                           slots, config echo, epoch/step, RNG state
    params/<name>.bin      one raw array per parameter
    optim/<name>/<slot>.bin

Entries are stored uncompressed with a fixed timestamp so identical states
produce byte-identical files.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import RunConfig
from .errors import CorruptCheckpointError, InvalidInputError
from .params import ParameterStore

FORMAT = "dapsam-checkpoint"
VERSION = 1
_EPOCH_TIME = (1980, 1, 1, 0, 0, 0)
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8"}


@dataclass
class Checkpoint:
    params: ParameterStore
    config: RunConfig
    epoch: int = 0
    step: int = 0
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    rng_state: dict[str, Any] | None = None
    best_val: float | None = None


def _dtype_name(arr: np.ndarray) -> str:
    name = arr.dtype.name
    if name not in _DTYPES:
        raise InvalidInputError(f"unsupported array dtype {name}")
    return name


def _write(zf: zipfile.ZipFile, arcname: str, data: bytes) -> None:
    info = zipfile.ZipInfo(arcname, date_time=_EPOCH_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def _array_record(arr: np.ndarray, arcname: str) -> tuple[dict, bytes]:
    arr = np.ascontiguousarray(arr)
    dt = _dtype_name(arr)
    return {"shape": list(arr.shape), "dtype": dt, "file": arcname}, arr.astype(_DTYPES[dt]).tobytes()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    records, blobs = [], []
    for name, tensor in ckpt.params.items():
        rec, data = _array_record(tensor.detach().cpu().numpy(), f"params/{name}.bin")
        rec.update(name=name, frozen=ckpt.params.is_frozen(name))
        records.append(rec)
        blobs.append((rec["file"], data))
    slots = []
    for name in sorted(ckpt.optimizer):
        for slot in sorted(ckpt.optimizer[name]):
            rec, data = _array_record(np.asarray(ckpt.optimizer[name][slot]), f"optim/{name}/{slot}.bin")
            rec.update(param=name, slot=slot)
            slots.append(rec)
            blobs.append((rec["file"], data))
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "best_val": ckpt.best_val,
        "rng_state": ckpt.rng_state,
        "params": records,
        "optimizer": slots,
    }
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
        for arcname, data in blobs:
            _write(zf, arcname, data)
    tmp.replace(path)
    return path


def _read_array(zf: zipfile.ZipFile, rec: dict, what: str) -> np.ndarray:
    try:
        data = zf.read(rec["file"])
        dt = np.dtype(_DTYPES[rec["dtype"]])
        shape = tuple(int(s) for s in rec["shape"])
    except KeyError as exc:
        raise CorruptCheckpointError(f"{what}: missing entry {exc}") from exc
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(data) != expected:
        raise CorruptCheckpointError(f"{what}: {len(data)} bytes stored, manifest shape {shape} needs {expected}")
    return np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise CorruptCheckpointError(f"{path}: not a readable checkpoint ({exc})") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except (KeyError, ValueError) as exc:
            raise CorruptCheckpointError(f"{path}: missing or invalid manifest") from exc
        if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
            raise CorruptCheckpointError(f"{path}: unsupported format {manifest.get('format')!r} v{manifest.get('version')}")
        store = ParameterStore()
        for rec in manifest["params"]:
            arr = _read_array(zf, rec, f"parameter {rec.get('name')!r}")
            store.add(rec["name"], torch.from_numpy(arr), frozen=bool(rec["frozen"]))
        optimizer: dict[str, dict[str, np.ndarray]] = {}
        for rec in manifest["optimizer"]:
            if rec["param"] not in store:
                raise CorruptCheckpointError(f"optimizer slot for unknown parameter {rec['param']!r}")
            optimizer.setdefault(rec["param"], {})[rec["slot"]] = _read_array(zf, rec, f"optimizer slot {rec['param']}/{rec['slot']}")
    return Checkpoint(
        params=store,
        config=RunConfig.from_dict(manifest["config"]),
        epoch=int(manifest["epoch"]),
        step=int(manifest["step"]),
        optimizer=optimizer,
        rng_state=manifest["rng_state"],
        best_val=manifest["best_val"],
    )


def restore_params(target: ParameterStore, source: ParameterStore) -> None:
    """Copy every array of ``source`` into ``target``; names and shapes must agree."""
    missing = set(target) ^ set(source)
    if missing:
        raise InvalidInputError(f"parameter sets differ: {sorted(missing)}")
    for name in target:
        if target.entry(name).shape != source.entry(name).shape:
            raise InvalidInputError(
                f"parameter {name!r}: checkpoint shape {source.entry(name).shape} != model shape {target.entry(name).shape}"
            )
        target.set(name, source[name].detach())
