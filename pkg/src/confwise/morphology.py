"""Binary dilation, the per-class inner boundary band, and HD95."""
from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import kernels
from .partition import _rank
from .tensor_io import check_labels

SHAPES = ("square", "cross")


def _check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask.astype(np.uint8)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary (values 0 or 1)")
    return mask.astype(np.uint8)


def dilate(mask, radius: int = 1, shape: str = "square") -> np.ndarray:
    """Dilate with a square (Chebyshev) or cross (Manhattan) footprint; outside the image is 0."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    if shape not in SHAPES:
        raise ValueError(f"shape must be one of {SHAPES}")
    return kernels.dilate(_check_mask(mask), radius, shape == "cross")


def boundary_mask(labels, num_classes: int, radius: int = 2, shape: str = "square") -> np.ndarray:
    """Union over classes of ``Y_c AND dilate(NOT Y_c)``: the band just inside each region."""
    labels = check_labels(labels, num_classes)
    out = np.zeros(labels.shape, dtype=np.uint8)
    for c in range(num_classes):
        yc = labels == c
        if not yc.any() or yc.all():
            continue
        out |= (yc & dilate(~yc, radius, shape).astype(bool)).astype(np.uint8)
    return out


def surface(mask) -> np.ndarray:
    """Mask pixels with at least one 4-neighbour outside the mask (image edge counts as outside)."""
    m = _check_mask(mask).astype(bool)
    padded = np.pad(m, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return m & ~interior


class HausdorffResult(NamedTuple):
    distance: float
    empty: bool  # one of the masks was empty; distance holds the sentinel


def surface_distances(pred, gt) -> np.ndarray:
    """Distances from each surface pixel of ``pred`` to the nearest surface pixel of ``gt``, and back."""
    sp, sg = surface(pred), surface(gt)
    d_pg = np.sqrt(kernels.squared_edt(sg)[sp])
    d_gp = np.sqrt(kernels.squared_edt(sp)[sg])
    return np.concatenate([d_pg, d_gp])


def hd95(pred, gt, sentinel: float | None = None) -> HausdorffResult:
    """95th nearest-rank percentile of the pooled symmetric surface distances.

    If either mask is empty the result is ``sentinel`` (default: the image
    diagonal) with ``empty=True``; two empty masks give 0.
    """
    pred, gt = _check_mask(pred), _check_mask(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    has_p, has_g = bool(pred.any()), bool(gt.any())
    if not has_p and not has_g:
        return HausdorffResult(0.0, True)
    if not (has_p and has_g):
        if sentinel is None:
            sentinel = math.hypot(*pred.shape)
        return HausdorffResult(float(sentinel), True)
    d = np.sort(surface_distances(pred, gt))
    return HausdorffResult(float(d[_rank(0.95, d.size) - 1]), False)
