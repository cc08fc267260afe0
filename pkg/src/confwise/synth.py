"""Deterministic lens-like synthetic segmentation data.

Each sample holds nested ellipses: a thin outer ring (class 1), a middle
annulus (class 2) and an inner core (class 3) on background (class 0). Images
are piecewise-constant intensities, blurred, noised and optionally crossed by
a bright vertical stripe.

Randomness comes from :class:`SplitMix64`, a counter-based generator whose
every output is a pure function of ``(seed, counter)``; see README for the
constants.
"""
from __future__ import annotations

import configparser
import csv
import math
import os
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .tensor_io import write_tensor

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_SPLIT = 0xD1B54A32D192ED03
_MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 output finalizer on a uint64 array."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Vectorized SplitMix64: output ``i`` is ``mix64(seed + (i + 1) * golden)``.

    Drawing ``n`` values advances the counter by ``n``, so the stream is the
    same whether values are drawn one at a time or in bulk.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        return mix64(np.uint64(self.seed) + i * _GOLDEN)

    def uniform(self, n: int = 1) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int = 1) -> np.ndarray:
        """Standard normals by Box-Muller; each value consumes two draws."""
        u = self.uniform(2 * n)
        u1, u2 = 1.0 - u[0::2], u[1::2]  # u1 in (0, 1]
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def integers(self, high: int, n: int = 1) -> np.ndarray:
        return np.floor(self.uniform(n) * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def split(self, key: int) -> "SplitMix64":
        """Independent child stream; depends only on the parent seed and ``key``."""
        return SplitMix64(derive_seed(self.seed, key))


def derive_seed(seed: int, key: int) -> int:
    z = np.array([(int(seed) ^ ((int(key) * _SPLIT) & _MASK64)) & _MASK64], dtype=np.uint64)
    return int(mix64(z + _GOLDEN)[0])


BACKGROUND, RING, CORTEX, NUCLEUS = range(4)
BASE_INTENSITY = np.array([0.1, 0.55, 0.45, 0.7])
STRIPE_INTENSITY = 0.9
STRIPE_WIDTH = 3
_ATTEMPTS = 64


@dataclass(frozen=True)
class SynthConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 4
    ring_thickness: int = 2
    boundary_blur_sigma: float = 1.5
    noise_sigma: float = 0.05
    artifact_prob: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != 4:
            raise ValueError("num_classes is fixed at 4")
        if min(self.height, self.width) < 32:
            raise ValueError(f"image must be at least 32x32, got {self.height}x{self.width}")
        if self.ring_thickness < 1:
            raise ValueError("ring_thickness must be >= 1")
        if self.boundary_blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur and noise sigma must be >= 0")
        if not 0.0 <= self.artifact_prob <= 1.0:
            raise ValueError("artifact_prob must lie in [0, 1]")


class Sample(NamedTuple):
    image: np.ndarray  # [1, H, W] float32 in [0, 1]
    labels: np.ndarray  # [H, W] uint8


def gaussian_kernel(sigma: float) -> np.ndarray:
    r = math.ceil(3 * sigma)
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable truncated Gaussian (radius ``ceil(3 sigma)``), reflect padding."""
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0), (0, 0)]
        pad[axis] = (r, r)
        p = np.pad(out, pad, mode="reflect" if out.shape[axis] > r else "symmetric")
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for i, kv in enumerate(k):
            acc += kv * (p[i:i + n] if axis == 0 else p[:, i:i + n])
        out = acc
    return out


_AREA_MARGIN = 1.05  # inner classes must beat the ring area by this factor before pixelization


def _fits(a: float, b: float, t: int) -> bool:
    ring = a * b - (a - t) * (b - t)
    inner = (a - t) * (b - t)
    return a > t + 1 and b > t + 1 and _AREA_MARGIN * ring < 0.5 * inner


def _ellipse_labels(cfg: SynthConfig, rng: SplitMix64):
    """Draw one nested-ellipse label map, or None if the ring cannot fit.

    The outer semi-axes start at about a fifth of the image size and grow
    only as far as needed for both inner classes to outsize the ring; the
    core's relative size is then drawn from the range where that holds.
    """
    H, W = cfg.height, cfg.width
    t = cfg.ring_thickness
    s = min(H, W)
    cy, cx, a_u, aspect, k_u, theta = rng.uniform(6)
    cy = H / 2 + (cy - 0.5) * 0.1 * H
    cx = W / 2 + (cx - 0.5) * 0.1 * W
    ratio = 0.75 + 0.25 * aspect  # minor / major axis
    a_max = 0.44 * s
    a_lo = 0.19 * s
    while a_lo <= a_max and not _fits(a_lo, a_lo * ratio, t):
        a_lo += 0.25
    if a_lo > a_max:
        return None
    a = a_lo + (max(a_lo, min(0.24 * s, a_max)) - a_lo) * a_u
    b = a * ratio
    ring = a * b - (a - t) * (b - t)
    inner = (a - t) * (b - t)
    k2_lo, k2_hi = _AREA_MARGIN * ring / inner, 1.0 - _AREA_MARGIN * ring / inner
    k = math.sqrt(k2_lo + (k2_hi - k2_lo) * (0.25 + 0.5 * k_u))
    theta = (theta - 0.5) * 0.6

    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)

    def inside(ea, eb):
        return (u / ea) ** 2 + (v / eb) ** 2 <= 1.0

    labels = np.zeros((H, W), dtype=np.uint8)
    labels[inside(a, b)] = RING
    labels[inside(a - t, b - t)] = CORTEX
    labels[inside(k * (a - t), k * (b - t))] = NUCLEUS
    return labels


def _valid(labels: np.ndarray) -> bool:
    counts = np.bincount(labels.ravel(), minlength=4)
    return bool((counts > 0).all()) and counts[RING] < counts[CORTEX] and counts[RING] < counts[NUCLEUS]


def generate_one(cfg: SynthConfig, rng: SplitMix64) -> Sample:
    for _ in range(_ATTEMPTS):
        labels = _ellipse_labels(cfg, rng)
        if labels is None or _valid(labels):
            break
    else:
        labels = None
    if labels is None:
        raise ValueError(
            f"cannot fit nested ellipses with ring thickness {cfg.ring_thickness} "
            f"in a {cfg.height}x{cfg.width} image"
        )
    img = BASE_INTENSITY[labels]
    img = gaussian_blur(img, cfg.boundary_blur_sigma)
    noise = rng.normal(img.size).reshape(img.shape)
    if cfg.noise_sigma > 0:
        img = img + cfg.noise_sigma * noise
    img = np.clip(img, 0.0, 1.0)
    u, pos = rng.uniform(2)
    if u < cfg.artifact_prob:
        x0 = int(pos * (cfg.width - STRIPE_WIDTH + 1))
        img[:, x0:x0 + STRIPE_WIDTH] = STRIPE_INTENSITY
    return Sample(img[None].astype(np.float32), labels)


def sample_seeds(cfg: SynthConfig, n: int) -> list:
    return [derive_seed(cfg.seed, i) for i in range(n)]


def generate(cfg: SynthConfig, n: int) -> list:
    """``n`` samples; sample ``i`` uses its own stream ``derive_seed(cfg.seed, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return [generate_one(cfg, SplitMix64(s)) for s in sample_seeds(cfg, n)]


def random_flip(sample: Sample, rng: SplitMix64 | None = None, force: bool | None = None) -> Sample:
    """Flip image and labels left-right with probability 0.5 (or as ``force`` says)."""
    flip = force if force is not None else bool(rng.uniform(1)[0] < 0.5)
    if not flip:
        return sample
    return Sample(np.ascontiguousarray(sample.image[:, :, ::-1]), np.ascontiguousarray(sample.labels[:, ::-1]))


def write_dataset(out_dir, cfg: SynthConfig, n: int) -> list:
    """Write ``img_%05d.segt``/``lbl_%05d.segt`` pairs plus ``manifest.csv`` and ``dataset.ini``."""
    samples = generate(cfg, n)
    os.makedirs(out_dir, exist_ok=True)
    seeds = sample_seeds(cfg, n)
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "image", "label", "seed"])
        for i, (s, seed) in enumerate(zip(samples, seeds)):
            img_name, lbl_name = f"img_{i:05d}.segt", f"lbl_{i:05d}.segt"
            write_tensor(os.path.join(out_dir, img_name), s.image)
            write_tensor(os.path.join(out_dir, lbl_name), s.labels)
            w.writerow([i, img_name, lbl_name, seed])
    cp = configparser.ConfigParser()
    cp["synth"] = {k: str(v) for k, v in asdict(cfg).items()}
    cp["synth"]["n"] = str(n)
    with open(os.path.join(out_dir, "dataset.ini"), "w") as fh:
        cp.write(fh)
    return samples
