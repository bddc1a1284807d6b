"""Synthetic multi-domain segmentation suite and its on-disk format.

Every sample starts from a random "anatomy" (smooth star-shaped blobs and a
matching label mask). A domain then distorts the intensities only:
contrast -> gamma -> multiplicative bias field -> additive noise -> clip.

File formats (all little-endian)::

    image: b"DAPD" | u8 version=1 | u32 H | u32 W | H*W float32 row-major
    mask:  b"DAPM" | u8 version=1 | u32 H | u32 W | H*W uint8 labels
"""
from __future__ import annotations

import json
import shutil
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import DataConfig, DomainSpec, _to_mapping
from .errors import DatasetLoadError, InvalidInputError, InventoryError
from .params import seed_for

IMAGE_MAGIC = b"DAPD"
MASK_MAGIC = b"DAPM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBII")
MANIFEST = "manifest.json"

# Mean intensity per label before any domain shift: background, structure, inner structure.
_TISSUE_LEVELS = (0.25, 0.6, 0.85)


@dataclass
class DomainSample:
    image: np.ndarray  # (H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in [0, K)
    domain: str
    spacing: tuple[float, float]
    index: int = 0


# ------------------------------------------------------------------ rendering
def _star_blob(rng, size, center, radius):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - center[0], xx - center[1]
    theta = np.arctan2(dy, dx)
    r = np.full_like(theta, radius)
    for k in (2, 3, 4):
        r += radius * rng.uniform(-0.1, 0.1) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    return np.hypot(dy, dx) <= r


def render_anatomy(anatomy_seed: int, size: int, num_labels: int) -> tuple[np.ndarray, np.ndarray]:
    """Domain-free intensity template and label mask for one sample."""
    rng = np.random.default_rng(anatomy_seed)
    mask = np.zeros((size, size), dtype=np.uint8)
    if num_labels == 2:
        n_blobs = 1 if rng.random() < 0.6 else 2
        for b in range(n_blobs):
            radius = size * (rng.uniform(0.15, 0.22) if b == 0 else rng.uniform(0.08, 0.12))
            center = rng.uniform(0.3, 0.7, size=2) * size
            mask[_star_blob(rng, size, center, radius)] = 1
    else:
        radius = size * rng.uniform(0.18, 0.26)
        center = rng.uniform(0.35, 0.65, size=2) * size
        mask[_star_blob(rng, size, center, radius)] = 1
        cup_center = center + rng.uniform(-0.1, 0.1, size=2) * radius
        mask[_star_blob(rng, size, cup_center, radius * rng.uniform(0.4, 0.6))] = 2
    levels = np.asarray(_TISSUE_LEVELS[:num_labels])
    template = levels[mask] + rng.normal(0.0, 0.04, size=mask.shape)
    template = gaussian_filter(template, sigma=1.0, mode="nearest")
    return np.clip(template, 0.0, 1.0), mask


def _bias_field(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    field = np.zeros((size, size))
    for _ in range(3):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        field += rng.uniform(0.5, 1.0) * np.cos(2 * np.pi * (fy * yy + fx * xx) + rng.uniform(0, 2 * np.pi))
    return field / np.abs(field).max()


def apply_domain(template: np.ndarray, domain: DomainSpec, intensity_seed: int) -> np.ndarray:
    """Contrast -> gamma -> bias field -> noise -> clip; returns float32 in [0, 1]."""
    rng = np.random.default_rng(intensity_seed)
    x = np.clip(0.5 + domain.contrast * (template - 0.5), 0.0, 1.0)
    x = x**domain.gamma
    x = x * (1.0 + domain.bias_amp * _bias_field(rng, template.shape[0]))
    x = x + rng.normal(0.0, domain.noise_std, size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def render_sample(seed: int, domain: DomainSpec, index: int, size: int, num_labels: int) -> tuple[np.ndarray, np.ndarray]:
    template, mask = render_anatomy(seed_for(seed, domain.name, index), size, num_labels)
    return apply_domain(template, domain, seed_for(seed, domain.name, index, "intensity")), mask


# ------------------------------------------------------------------ file io
def write_image(path: Path, image: np.ndarray) -> None:
    H, W = image.shape
    Path(path).write_bytes(_HEADER.pack(IMAGE_MAGIC, FORMAT_VERSION, H, W) + image.astype("<f4").tobytes())


def write_mask(path: Path, mask: np.ndarray) -> None:
    H, W = mask.shape
    Path(path).write_bytes(_HEADER.pack(MASK_MAGIC, FORMAT_VERSION, H, W) + mask.astype(np.uint8).tobytes())


def _read(path: Path, magic: bytes, dtype: str) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetLoadError(path, f"cannot read ({exc.strerror})") from exc
    if len(blob) < _HEADER.size:
        raise DatasetLoadError(path, "truncated header")
    got_magic, version, H, W = _HEADER.unpack_from(blob)
    if got_magic != magic:
        raise DatasetLoadError(path, f"bad magic {got_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetLoadError(path, f"unsupported version {version}")
    expected = H * W * np.dtype(dtype).itemsize
    payload = blob[_HEADER.size:]
    if len(payload) != expected:
        raise DatasetLoadError(path, f"payload has {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(H, W).copy()


def read_image(path: Path) -> np.ndarray:
    return _read(path, IMAGE_MAGIC, "<f4").astype(np.float32)


def read_mask(path: Path) -> np.ndarray:
    return _read(path, MASK_MAGIC, "u1")


# ------------------------------------------------------------------ suites
def generate_domain_suite(config: DataConfig, out_dir: str | Path, seed: int, *, overwrite: bool = False) -> Path:
    """Write every domain's samples plus ``manifest.json`` under ``out_dir``.

    Output is a pure function of (config, seed). A non-empty ``out_dir`` is
    refused unless ``overwrite`` is set and it holds a previous suite.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise InvalidInputError(f"{out} exists and is not empty (pass overwrite to replace it)")
        if not (out / MANIFEST).is_file():
            raise InvalidInputError(f"refusing to overwrite {out}: it does not contain a generated suite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    for domain in config.domains:
        ddir = out / domain.name
        ddir.mkdir()
        images, masks = [], []
        for i in range(config.samples_per_domain):
            image, mask = render_sample(seed, domain, i, config.image_size, config.num_labels)
            img_rel, mask_rel = f"{domain.name}/{i:04d}_img.dapd", f"{domain.name}/{i:04d}_mask.dapm"
            write_image(out / img_rel, image)
            write_mask(out / mask_rel, mask)
            images.append(img_rel)
            masks.append(mask_rel)
        entries.append({"name": domain.name, "images": images, "masks": masks})

    manifest = {
        "format": "dapsam-synthetic",
        "version": FORMAT_VERSION,
        "seed": int(seed),
        "num_labels": config.num_labels,
        "image_size": config.image_size,
        "spacing": list(config.spacing),
        "config": _to_mapping(config),
        "domains": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


@dataclass
class Dataset:
    domains: dict[str, list[DomainSample]]
    num_labels: int
    image_size: int
    spacing: tuple[float, float]

    def __len__(self):
        return sum(len(v) for v in self.domains.values())


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    mpath = root / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
        K = int(manifest["num_labels"])
        size = int(manifest["image_size"])
        spacing = tuple(float(s) for s in manifest["spacing"])
        entries = manifest["domains"]
    except OSError as exc:
        raise DatasetLoadError(mpath, "missing manifest") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetLoadError(mpath, f"malformed manifest ({exc})") from exc

    domains: dict[str, list[DomainSample]] = {}
    for entry in entries:
        name = entry["name"]
        if len(entry["images"]) != len(entry["masks"]):
            raise DatasetLoadError(mpath, f"domain {name}: image/mask count mismatch")
        samples = []
        for i, (img_rel, mask_rel) in enumerate(zip(entry["images"], entry["masks"])):
            image = read_image(root / img_rel)
            mask = read_mask(root / mask_rel)
            if image.shape != (size, size):
                raise DatasetLoadError(root / img_rel, f"shape {image.shape} != manifest size {size}x{size}")
            if mask.shape != (size, size):
                raise DatasetLoadError(root / mask_rel, f"shape {mask.shape} != manifest size {size}x{size}")
            if not np.isfinite(image).all() or image.min() < 0 or image.max() > 1:
                raise DatasetLoadError(root / img_rel, "intensities outside [0, 1]")
            if mask.max() >= K:
                raise DatasetLoadError(root / mask_rel, f"label {int(mask.max())} outside [0, {K})")
            samples.append(DomainSample(image, mask, name, spacing, i))
        domains[name] = samples
    return Dataset(domains, K, size, spacing)


def leave_one_out_splits(domains: dict[str, list[DomainSample]], train_domain: str):
    """Train on ``train_domain``; every other domain becomes its own test set."""
    if train_domain not in domains:
        raise InventoryError(f"unknown train domain {train_domain!r}; available: {sorted(domains)}")
    tests = {name: samples for name, samples in domains.items() if name != train_domain}
    return domains[train_domain], tests


def stack(samples: list[DomainSample]) -> tuple[np.ndarray, np.ndarray]:
    """(batch, H, W, 1) images and (batch, H, W) masks."""
    images = np.stack([s.image for s in samples])[..., None]
    masks = np.stack([s.mask for s in samples]).astype(np.int64)
    return images, masks
