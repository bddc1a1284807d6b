"""Segmentation metrics: Dice similarity coefficient and average surface distance.

Hot kernels come in two flavours with identical results: an ``@njit`` loop
version and a vectorised numpy version. The active one is chosen at import
time from ``DAPSAM_DISABLE_NUMBA`` (see :mod:`dapsam._accel`).
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import NUMBA_ENABLED, njit
from .errors import InvalidInputError

UNDEFINED = math.nan


# --------------------------------------------------------------------- kernels
@njit
def _overlap_counts_nb(pred, gt, label):
    n_pred = 0
    n_gt = 0
    n_both = 0
    flat_p = pred.ravel()
    flat_g = gt.ravel()
    for i in range(flat_p.size):
        a = flat_p[i] == label
        b = flat_g[i] == label
        n_pred += a
        n_gt += b
        n_both += a and b
    return n_pred, n_gt, n_both


def _overlap_counts_np(pred, gt, label):
    a = pred == label
    b = gt == label
    return int(a.sum()), int(b.sum()), int(np.logical_and(a, b).sum())


@njit
def _boundary_nb(mask):
    H, W = mask.shape
    out = np.zeros((H, W), dtype=np.bool_)
    for i in range(H):
        for j in range(W):
            if not mask[i, j]:
                continue
            if i == 0 or j == 0 or i == H - 1 or j == W - 1:
                out[i, j] = True
            elif not (mask[i - 1, j] and mask[i + 1, j] and mask[i, j - 1] and mask[i, j + 1]):
                out[i, j] = True
    return out


def _boundary_np(mask):
    padded = np.pad(mask, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return mask & ~interior


@njit
def _mean_min_distance_nb(src, dst, sy, sx):
    total = 0.0
    for i in range(src.shape[0]):
        best = np.inf
        for j in range(dst.shape[0]):
            dy = (src[i, 0] - dst[j, 0]) * sy
            dx = (src[i, 1] - dst[j, 1]) * sx
            d = dy * dy + dx * dx
            if d < best:
                best = d
        total += np.sqrt(best)
    return total / src.shape[0]


def _mean_min_distance_np(src, dst, sy, sx, chunk=2048):
    scale = np.array([sy, sx])
    a = src * scale
    b = dst * scale
    mins = np.empty(len(a))
    for start in range(0, len(a), chunk):
        diff = a[start:start + chunk, None, :] - b[None, :, :]
        mins[start:start + chunk] = np.sqrt((diff * diff).sum(-1).min(axis=1))
    return float(mins.sum() / len(a))


KERNELS = {
    "numba": (_overlap_counts_nb, _boundary_nb, _mean_min_distance_nb),
    "numpy": (_overlap_counts_np, _boundary_np, _mean_min_distance_np),
}
BACKEND = "numba" if NUMBA_ENABLED else "numpy"


def _kernels(backend):
    return KERNELS[backend or BACKEND]


# --------------------------------------------------------------------- public
def _pair(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
    return np.ascontiguousarray(pred, dtype=np.int64), np.ascontiguousarray(gt, dtype=np.int64)


def dsc(pred, gt, label: int, *, backend: str | None = None) -> float:
    """2|P & G| / (|P| + |G|) for one label; 1.0 when both are empty."""
    pred, gt = _pair(pred, gt)
    n_pred, n_gt, n_both = _kernels(backend)[0](pred, gt, int(label))
    if n_pred + n_gt == 0:
        return 1.0
    return 2.0 * n_both / (n_pred + n_gt)


def boundary(mask, *, backend: str | None = None) -> np.ndarray:
    """Foreground pixels 4-adjacent to background or touching the image border."""
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if mask.ndim != 2:
        raise InvalidInputError(f"boundary expects a 2D mask, got shape {mask.shape}")
    return _kernels(backend)[1](mask)


def asd(pred, gt, label: int, spacing=(1.0, 1.0), *, backend: str | None = None) -> float:
    """Symmetric average surface distance (in spacing units) for one label of a 2D slice.

    Returns NaN when either mask is empty for ``label``.
    """
    pred, gt = _pair(pred, gt)
    if pred.ndim != 2:
        raise InvalidInputError(f"asd works on single 2D slices, got shape {pred.shape}")
    sy, sx = (float(s) for s in spacing)
    _, find_boundary, mean_min = _kernels(backend)
    a = pred == label
    b = gt == label
    if not a.any() or not b.any():
        return UNDEFINED
    pts_a = np.argwhere(find_boundary(a)).astype(np.float64)
    pts_b = np.argwhere(find_boundary(b)).astype(np.float64)
    return 0.5 * (mean_min(pts_a, pts_b, sy, sx) + mean_min(pts_b, pts_a, sy, sx))


def slice_scores(pred, gt, num_labels: int, spacing=(1.0, 1.0)) -> dict[int, tuple[float, float]]:
    """``{label: (dsc, asd)}`` for every foreground label of one 2D slice."""
    return {k: (dsc(pred, gt, k), asd(pred, gt, k, spacing)) for k in range(1, num_labels)}
