"""Segmentation losses with analytic gradients with respect to pre-softmax logits.

Every loss takes a probability map ``probs`` [C, H, W] (softmax output) and an
integer label map [H, W] and returns a :class:`LossResult` whose
``grad_logits`` already includes the softmax Jacobian. All arithmetic is
float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .partition import ConfidencePartition, PartitionConfig, cluster
from .tensor_io import check_labels, one_hot

CLAMP = 1e-12


@dataclass
class LossResult:
    value: float
    grad_logits: np.ndarray


def softmax_logits(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 3:
        raise ValueError(f"logits must be [C,H,W], got {z.shape}")
    if np.isnan(z).any():
        raise ValueError("logits contain NaN")
    e = np.exp(z - z.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _softmax_backward(probs, grad_probs):
    # dL/dz_j = p_j * (g_j - sum_c g_c p_c)
    return probs * (grad_probs - (grad_probs * probs).sum(axis=0, keepdims=True))


def _prepare(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"probabilities must be [C,H,W], got {probs.shape}")
    labels = check_labels(labels, probs.shape[0])
    if labels.shape != probs.shape[1:]:
        raise ValueError(f"label shape {labels.shape} does not match probabilities {probs.shape}")
    return probs, labels


def _true_class_prob(probs, labels):
    return np.take_along_axis(probs, labels[None].astype(np.intp), axis=0)[0]


def ce_loss(probs, labels) -> LossResult:
    probs, labels = _prepare(probs, labels)
    n = labels.size
    pt = _true_class_prob(probs, labels)
    value = -np.log(np.maximum(pt, CLAMP)).sum() / n
    grad = (probs - one_hot(labels, probs.shape[0])) / n
    return LossResult(float(value), grad)


def focal_loss(probs, labels, gamma: float = 2.0) -> LossResult:
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    probs, labels = _prepare(probs, labels)
    n = labels.size
    pt = _true_class_prob(probs, labels)
    logp = np.log(np.maximum(pt, CLAMP))
    q = 1.0 - pt
    value = -(q**gamma * logp).sum() / n
    # dl/dp_t * p_t, written without 1/p_t
    with np.errstate(divide="ignore", invalid="ignore"):
        mod = np.where(q > 0, gamma * q ** (gamma - 1.0) * pt * logp, 0.0) if gamma > 0 else 0.0
    g = (mod - q**gamma) / n
    grad = g[None] * (one_hot(labels, probs.shape[0]) - probs)
    return LossResult(float(value), grad)


def dice_loss(probs, labels, smooth: float = 1e-5) -> LossResult:
    if smooth <= 0:
        raise ValueError("smooth must be > 0")
    probs, labels = _prepare(probs, labels)
    C = probs.shape[0]
    y = one_hot(labels, C)
    inter = (probs * y).sum(axis=(1, 2))
    denom = probs.sum(axis=(1, 2)) + y.sum(axis=(1, 2)) + smooth
    score = (2 * inter + smooth) / denom
    value = 1.0 - score.mean()
    d_score = (2 * y * denom[:, None, None] - (2 * inter + smooth)[:, None, None]) / (denom**2)[:, None, None]
    grad_p = -d_score / C
    return LossResult(float(value), _softmax_backward(probs, grad_p))


def _tversky_index(probs, y, a, b, smooth):
    """Per-class Tversky index and its derivative with respect to each probability.

    Smoothing enters in Dice units, ``(2TP + s) / (2TP + 2a FP + 2b FN + s)``,
    so that ``a = b = 0.5`` reproduces :func:`dice_loss` exactly.
    """
    tp = (probs * y).sum(axis=(1, 2))
    fp = (probs * (1 - y)).sum(axis=(1, 2))
    fn = ((1 - probs) * y).sum(axis=(1, 2))
    num = 2 * tp + smooth
    den = 2 * tp + 2 * a * fp + 2 * b * fn + smooth
    ti = num / den
    d_num = 2 * y
    d_den = 2 * y + 2 * a * (1 - y) - 2 * b * y
    d_ti = (d_num * den[:, None, None] - num[:, None, None] * d_den) / (den**2)[:, None, None]
    return ti, d_ti


def tversky_loss(probs, labels, a: float = 0.3, b: float = 0.7, smooth: float = 1e-5) -> LossResult:
    if a <= 0 or b <= 0:
        raise ValueError("Tversky weights must be > 0")
    probs, labels = _prepare(probs, labels)
    C = probs.shape[0]
    ti, d_ti = _tversky_index(probs, one_hot(labels, C), a, b, smooth)
    value = 1.0 - ti.mean()
    return LossResult(float(value), _softmax_backward(probs, -d_ti / C))


def focal_tversky_loss(
    probs, labels, a: float = 0.3, b: float = 0.7, gamma_ft: float = 0.75, smooth: float = 1e-5
) -> LossResult:
    if gamma_ft <= 0:
        raise ValueError("gamma_ft must be > 0")
    if a <= 0 or b <= 0:
        raise ValueError("Tversky weights must be > 0")
    probs, labels = _prepare(probs, labels)
    C = probs.shape[0]
    ti, d_ti = _tversky_index(probs, one_hot(labels, C), a, b, smooth)
    gap = np.maximum(1.0 - ti, 0.0)
    value = (gap**gamma_ft).mean()
    with np.errstate(divide="ignore"):
        outer = np.where(gap > 0, gamma_ft * gap ** (gamma_ft - 1.0), 0.0)
    grad_p = -(outer[:, None, None] * d_ti) / C
    return LossResult(float(value), _softmax_backward(probs, grad_p))


# --- adaptive confidence-wise loss -------------------------------------------


@dataclass(frozen=True)
class AcwConfig:
    """``alpha`` sets the group weights: high group ``1 - alpha``, low group ``1 + alpha``.

    ``ce_at_zero`` makes ``alpha == 0`` fall back to plain cross-entropy; by
    default ``alpha == 0`` is the unweighted per-group-mean form.
    """

    alpha: float = 0.4
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    include_background: bool = True
    ce_at_zero: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")


def _included_classes(partition: ConfidencePartition, include_background: bool):
    return [
        i for i, part in enumerate(partition.classes)
        if not part.empty and (include_background or i > 0)
    ]


def acw_pixel_weights(partition: ConfidencePartition, shape, alpha: float, include_background=True):
    """Per-pixel weight ``W_g / (|R_g| * C_present)``; zero for excluded pixels."""
    classes = _included_classes(partition, include_background)
    if not classes:
        raise ValueError("no class with a non-empty ground-truth region")
    n_present = len(classes)
    w = np.zeros(int(np.prod(shape)))
    for i in classes:
        part = partition[i]
        if part.degenerate:
            region = np.concatenate([part.high_idx, part.low_idx])
            w[region] = 1.0 / (part.region_size * n_present)
        else:
            w[part.high_idx] = (1.0 - alpha) / (part.high_idx.size * n_present)
            w[part.low_idx] = (1.0 + alpha) / (part.low_idx.size * n_present)
    return w.reshape(shape)


def acw_loss(probs, labels, cfg: AcwConfig | None = None, partition: ConfidencePartition | None = None):
    """Adaptive confidence-wise loss.

    Returns ``(LossResult, ConfidencePartition)``. The partition is recomputed
    from ``probs`` unless one is passed in, and is always treated as constant
    when differentiating.
    """
    cfg = cfg or AcwConfig()
    probs, labels = _prepare(probs, labels)
    if partition is None:
        partition = cluster(probs, labels, cfg.partition)
    if cfg.alpha == 0.0 and cfg.ce_at_zero:
        return ce_loss(probs, labels), partition
    w = acw_pixel_weights(partition, labels.shape, cfg.alpha, cfg.include_background)
    logp = np.log(np.maximum(_true_class_prob(probs, labels), CLAMP))
    value = -(w * logp).sum()
    grad = w[None] * (probs - one_hot(labels, probs.shape[0]))
    return LossResult(float(value), grad), partition


def class_terms(probs, labels, partition: ConfidencePartition):
    """Sums of ``log p`` over each class region and its high/low groups: (T, T_h, T_l)."""
    probs, labels = _prepare(probs, labels)
    flat = probs.reshape(probs.shape[0], -1)
    C = probs.shape[0]
    T, Th, Tl = np.zeros(C), np.zeros(C), np.zeros(C)
    for i, part in enumerate(partition.classes):
        lh = np.log(np.maximum(flat[i, part.high_idx], CLAMP))
        ll = np.log(np.maximum(flat[i, part.low_idx], CLAMP))
        Th[i], Tl[i] = lh.sum(), ll.sum()
        T[i] = np.concatenate([lh, ll]).sum()
    return T, Th, Tl


def acw_value_suppression_form(probs, labels, cfg: AcwConfig, partition: ConfidencePartition) -> float:
    """ACW value written as region-mean CE plus a suppression and an enhancement term.

    Independent of :func:`acw_loss`'s per-pixel weighting; the two must agree.
    """
    T, Th, Tl = class_terms(probs, labels, partition)
    a = cfg.alpha
    classes = _included_classes(partition, cfg.include_background)
    total = 0.0
    for i in classes:
        part = partition[i]
        if part.degenerate:
            total += -T[i] / part.region_size
            continue
        beta = part.beta
        suppression = (a + beta - 1.0) / beta * Th[i]
        enhancement = (a + beta) / (1.0 - beta) * Tl[i]
        total += -(T[i] - suppression + enhancement) / part.region_size
    return total / len(classes)


# --- gradient checking --------------------------------------------------------


def check_gradient(loss_fn, logits, labels, epsilon: float = 1e-5, n_samples=None, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference logit gradients.

    ``loss_fn(probs, labels)`` may return a LossResult or a tuple whose first
    element is one. Coordinates are all of them, or ``n_samples`` drawn
    without replacement. Relative error is ``|a - n| / max(|a|, |n|, floor)``
    with ``floor = 1e-3 * max|a|``: a central difference carries roughly
    ``1e-16 * |f| / epsilon`` of rounding noise, which swamps coordinates whose
    gradient is orders of magnitude below the largest one.
    """
    z = np.array(logits, dtype=np.float64)

    def run(zz):
        out = loss_fn(softmax_logits(zz), labels)
        return out[0] if isinstance(out, tuple) else out

    analytic = run(z).grad_logits
    floor = max(1e-3 * np.abs(analytic).max(), 1e-300)
    coords = np.arange(z.size)
    if n_samples is not None and n_samples < z.size:
        coords = np.random.default_rng(seed).choice(z.size, n_samples, replace=False)
    worst = 0.0
    flat = z.reshape(-1)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + epsilon
        up = run(z).value
        flat[c] = orig - epsilon
        down = run(z).value
        flat[c] = orig
        num = (up - down) / (2 * epsilon)
        a = analytic.reshape(-1)[c]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    return worst


# --- name-based construction --------------------------------------------------

BASE_LOSSES = ("ce", "focal", "dice", "tversky", "focal_tversky", "acw")
LOSS_NAMES = BASE_LOSSES + tuple(f"acw+{n}" for n in ("dice", "focal", "tversky", "focal_tversky"))


def make_loss(
    name: str,
    alpha: float = 0.4,
    q: float = 0.8,
    scope: str = "per_class",
    literal_percentile: bool = False,
    include_background: bool = True,
    ce_at_zero: bool = False,
    gamma: float = 2.0,
    tversky_a: float = 0.3,
    tversky_b: float = 0.7,
    gamma_ft: float = 0.75,
    smooth: float = 1e-5,
    combo_weight: float = 0.5,
):
    """Build ``fn(probs, labels) -> (LossResult, partition or None)`` from a loss name.

    ``"acw+X"`` is ``combo_weight * ACW + (1 - combo_weight) * X``.
    """
    if name not in LOSS_NAMES:
        raise ValueError(f"unknown loss {name!r}; choose from {', '.join(LOSS_NAMES)}")
    acw_cfg = AcwConfig(
        alpha=alpha,
        partition=PartitionConfig(q=q, scope=scope, literal_percentile=literal_percentile),
        include_background=include_background,
        ce_at_zero=ce_at_zero,
    )
    simple = {
        "ce": ce_loss,
        "focal": lambda p, y: focal_loss(p, y, gamma),
        "dice": lambda p, y: dice_loss(p, y, smooth),
        "tversky": lambda p, y: tversky_loss(p, y, tversky_a, tversky_b, smooth),
        "focal_tversky": lambda p, y: focal_tversky_loss(p, y, tversky_a, tversky_b, gamma_ft, smooth),
    }
    if name in simple:
        f = simple[name]
        return lambda p, y: (f(p, y), None)
    if name == "acw":
        return lambda p, y: acw_loss(p, y, acw_cfg)
    other = simple[name.split("+", 1)[1]]
    if not 0.0 <= combo_weight <= 1.0:
        raise ValueError("combo_weight must lie in [0, 1]")

    def combined(p, y):
        first, part = acw_loss(p, y, acw_cfg)
        second = other(p, y)
        value = combo_weight * first.value + (1 - combo_weight) * second.value
        grad = combo_weight * first.grad_logits + (1 - combo_weight) * second.grad_logits
        return LossResult(value, grad), part

    return combined
