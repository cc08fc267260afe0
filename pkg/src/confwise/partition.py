"""Confidence clustering: split each class's ground-truth region by a quantile threshold."""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .tensor_io import check_labels


def _rank(fraction: float, n: int) -> int:
    # exact ceil(fraction * n); 0.7 * 10 must give 7, not 8
    f = Fraction(fraction).limit_denominator(1_000_000)
    return max(1, math.ceil(f * n))


def quantile(values, fraction: float) -> float:
    """Nearest-rank quantile: the ``ceil(fraction * n)``-th smallest value."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    k = _rank(fraction, values.size)
    return float(np.partition(values, k - 1)[k - 1])


@dataclass(frozen=True)
class PartitionConfig:
    """How the confidence threshold is chosen.

    ``q`` is the target share of each ground-truth region that lands in the
    high-confidence group, so the threshold is the ``1 - q`` quantile. With
    ``literal_percentile`` the threshold is the ``q`` quantile instead (the
    "80th percentile" reading, leaving about 20% of pixels above it).
    ``scope="global"`` derives one threshold from the true-class probabilities
    of all pixels rather than one per class.
    """

    q: float = 0.8
    scope: str = "per_class"
    literal_percentile: bool = False
    quantile_mode: str = "nearest_rank"

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if self.scope not in ("per_class", "global"):
            raise ValueError(f"unknown scope {self.scope!r}")
        if self.quantile_mode != "nearest_rank":
            raise ValueError(f"unknown quantile mode {self.quantile_mode!r}")

    @property
    def threshold_fraction(self) -> float:
        return self.q if self.literal_percentile else 1.0 - self.q


@dataclass(frozen=True)
class ClassPartition:
    high_idx: np.ndarray  # flat pixel indices, ascending
    low_idx: np.ndarray
    threshold: float
    beta: float
    region_size: int
    degenerate: bool

    @property
    def empty(self) -> bool:
        return self.region_size == 0


@dataclass(frozen=True)
class ConfidencePartition:
    classes: tuple
    config: PartitionConfig

    def __getitem__(self, i) -> ClassPartition:
        return self.classes[i]

    def __len__(self):
        return len(self.classes)


_EMPTY = np.empty(0, dtype=np.intp)


def cluster(probs, labels, cfg: PartitionConfig | None = None) -> ConfidencePartition:
    """Split every class's ground-truth pixels into high (p > t) and low (p <= t) groups.

    A class whose split leaves one side empty (e.g. all probabilities equal) is
    flagged ``degenerate``; the loss then treats its region as a single group.
    """
    cfg = cfg or PartitionConfig()
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"probabilities must be [C,H,W], got {probs.shape}")
    C = probs.shape[0]
    labels = check_labels(labels, C)
    if labels.shape != probs.shape[1:]:
        raise ValueError(f"label shape {labels.shape} does not match probabilities {probs.shape}")
    flat_labels = labels.ravel()
    flat_probs = probs.reshape(C, -1)

    global_t = None
    if cfg.scope == "global":
        true_p = flat_probs[flat_labels, np.arange(flat_labels.size)]
        global_t = quantile(true_p, cfg.threshold_fraction)

    parts = []
    for i in range(C):
        region = np.flatnonzero(flat_labels == i)
        if region.size == 0:
            parts.append(ClassPartition(_EMPTY, _EMPTY, math.nan, math.nan, 0, False))
            continue
        p = flat_probs[i, region]
        t = global_t if global_t is not None else quantile(p, cfg.threshold_fraction)
        is_high = p > t
        high, low = region[is_high], region[~is_high]
        parts.append(
            ClassPartition(
                high_idx=high,
                low_idx=low,
                threshold=t,
                beta=high.size / region.size,
                region_size=int(region.size),
                degenerate=high.size == 0 or low.size == 0,
            )
        )
    return ConfidencePartition(tuple(parts), cfg)
