"""TinyNet: a three-layer per-pixel classifier with hand-written backprop, Adam and a cosine schedule."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import kernels
from .losses import softmax_logits
from .metrics import bece, ece, merge_reports, seg_scores
from .synth import Sample, SplitMix64, derive_seed, random_flip
from .tensor_io import read_tensor, write_tensor

# (name, in channels, out channels or None for num_classes, kernel size)
ARCH = (("conv1", 1, 8, 3), ("conv2", 8, 16, 3), ("conv3", 16, None, 1))


class DivergenceError(RuntimeError):
    pass


def param_count(num_classes: int) -> int:
    return 8 * (9 + 1) + 16 * (8 * 9 + 1) + num_classes * (16 + 1)


class TinyNet:
    """conv3x3(1->8), ReLU, conv3x3(8->16), ReLU, conv1x1(16->C); same zero padding."""

    def __init__(self, num_classes: int = 4, seed: int = 0, dtype=np.float64, init: str = "glorot"):
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        for i, (name, cin, cout, k) in enumerate(ARCH):
            cout = cout or num_classes
            shape = (cout, cin, k, k)
            if init == "glorot":
                limit = math.sqrt(6.0 / (cin * k * k + cout * k * k))
                u = SplitMix64(derive_seed(seed, i)).uniform(int(np.prod(shape)))
                w = ((2.0 * u - 1.0) * limit).reshape(shape)
            elif init == "zeros":
                w = np.zeros(shape)
            else:
                raise ValueError(f"unknown init {init!r}")
            self.params[f"{name}.w"] = w.astype(self.dtype)
            self.params[f"{name}.b"] = np.zeros(cout, dtype=self.dtype)

    @property
    def size(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "TinyNet":
        other = TinyNet.__new__(TinyNet)
        other.num_classes, other.dtype = self.num_classes, self.dtype
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def forward(self, image, return_cache: bool = False):
        x = np.asarray(image)
        if x.ndim != 3 or x.shape[0] != 1:
            raise ValueError(f"image must be [1,H,W], got {x.shape}")
        x = x.astype(self.dtype)
        p = self.params
        z1 = kernels.conv2d_forward(x, p["conv1.w"], p["conv1.b"])
        a1 = np.maximum(z1, 0)
        z2 = kernels.conv2d_forward(a1, p["conv2.w"], p["conv2.b"])
        a2 = np.maximum(z2, 0)
        logits = kernels.conv2d_forward(a2, p["conv3.w"], p["conv3.b"])
        if return_cache:
            return logits, (x, a1, a2)
        return logits

    def backward(self, cache, grad_logits) -> dict:
        x, a1, a2 = cache
        g = np.asarray(grad_logits, dtype=self.dtype)
        if g.shape != (self.num_classes,) + x.shape[1:]:
            raise ValueError(f"grad_logits shape {g.shape} does not match the forward output")
        p = self.params
        grads = {}
        ga2, grads["conv3.w"], grads["conv3.b"] = kernels.conv2d_backward(a2, p["conv3.w"], g)
        gz2 = ga2 * (a2 > 0)
        ga1, grads["conv2.w"], grads["conv2.b"] = kernels.conv2d_backward(a1, p["conv2.w"], gz2)
        gz1 = ga1 * (a1 > 0)
        _, grads["conv1.w"], grads["conv1.b"] = kernels.conv2d_backward(x, p["conv1.w"], gz1, need_gx=False)
        return grads

    def predict(self, image) -> np.ndarray:
        return softmax_logits(self.forward(image).astype(np.float64))

    def save(self, path) -> None:
        """Checkpoint directory: one SEGT file per tensor plus ``manifest.csv``."""
        os.makedirs(path, exist_ok=True)
        with open(os.path.join(path, "manifest.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["name", "file", "shape"])
            for name, arr in self.params.items():
                fname = f"{name}.segt"
                write_tensor(os.path.join(path, fname), arr)
                w.writerow([name, fname, "x".join(map(str, arr.shape))])

    @classmethod
    def load(cls, path) -> "TinyNet":
        with open(os.path.join(path, "manifest.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        params = {}
        for r in rows:
            arr = read_tensor(os.path.join(path, r["file"]))
            if "x".join(map(str, arr.shape)) != r["shape"]:
                raise ValueError(f"{path}: {r['name']} has shape {arr.shape}, manifest says {r['shape']}")
            params[r["name"]] = arr
        num_classes = params["conv3.b"].shape[0]
        net = cls(num_classes, dtype=params["conv3.b"].dtype, init="zeros")
        if set(params) != set(net.params):
            raise ValueError(f"{path}: checkpoint tensors {sorted(params)} do not match the architecture")
        for k, v in params.items():
            if v.shape != net.params[k].shape:
                raise ValueError(f"{path}: {k} has shape {v.shape}, expected {net.params[k].shape}")
        net.params = params
        return net


def cosine_lr(epoch: int, total: int, base_lr: float = 0.0015) -> float:
    if total <= 0:
        return base_lr
    return base_lr * (1.0 + math.cos(math.pi * epoch / total)) / 2.0


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class EvalResult:
    dsc: np.ndarray  # per class, averaged over images
    iou: np.ndarray
    hd95: np.ndarray
    mean_dsc: float
    mean_iou: float
    mean_hd95: float
    ece: float  # pooled over all pixels of all images
    bece: float
    bece_empty: bool

    def as_dict(self) -> dict:
        out = {"mean_dsc": self.mean_dsc, "mean_iou": self.mean_iou, "hd95": self.mean_hd95,
               "ece": self.ece, "bece": self.bece}
        out.update({f"dsc_{c}": float(d) for c, d in enumerate(self.dsc)})
        return out


def evaluate(net: TinyNet, samples, M: int = 10, radius: int = 2, shape: str = "square") -> EvalResult:
    C = net.num_classes
    scores, e_reports, b_reports = [], [], []
    for s in samples:
        probs = net.predict(s.image)
        scores.append(seg_scores(probs.argmax(axis=0), s.labels, C))
        e_reports.append(ece(probs, s.labels, M))
        b_reports.append(bece(probs, s.labels, M, radius, shape))
    dsc = np.mean([sc.dsc for sc in scores], axis=0)
    iou = np.mean([sc.iou for sc in scores], axis=0)
    hd = np.mean([sc.hd95 for sc in scores], axis=0)
    b = merge_reports(b_reports)
    return EvalResult(
        dsc=dsc,
        iou=iou,
        hd95=hd,
        mean_dsc=float(np.mean([sc.mean_dsc for sc in scores])),
        mean_iou=float(np.mean([sc.mean_iou for sc in scores])),
        mean_hd95=float(np.mean([sc.mean_hd95 for sc in scores])),
        ece=merge_reports(e_reports).score,
        bece=b.score,
        bece_empty=b.empty,
    )


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    val: list = field(default_factory=list)  # EvalResult.as_dict() per epoch
    steps: int = 0


def train(
    net: TinyNet,
    dataset,
    loss_fn,
    epochs: int,
    seed: int = 0,
    val=None,
    base_lr: float = 0.0015,
    flip: bool = True,
    val_every: int = 1,
    eval_kwargs: dict | None = None,
) -> TrainLog:
    """Batch-size-1 Adam with a per-epoch cosine learning rate.

    ``loss_fn(probs, labels)`` returns a LossResult (or a tuple led by one);
    ACW recomputes its partition on every call. Each epoch visits the samples
    in a fresh seeded order, flipping each with probability 0.5.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("dataset is empty")
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    rng = SplitMix64(derive_seed(seed, 0x5EED))
    opt = Adam()
    log = TrainLog()
    for epoch in range(epochs):
        lr = cosine_lr(epoch, epochs, base_lr)
        total = 0.0
        for idx in rng.permutation(len(dataset)):
            s = dataset[idx]
            if flip:
                s = random_flip(s, rng)
            logits, cache = net.forward(s.image, return_cache=True)
            if not np.isfinite(logits).all():
                raise DivergenceError(f"non-finite logits at epoch {epoch}, step {log.steps}, sample {idx}")
            out = loss_fn(softmax_logits(logits.astype(np.float64)), s.labels)
            res = out[0] if isinstance(out, tuple) else out
            if not (math.isfinite(res.value) and np.isfinite(res.grad_logits).all()):
                raise DivergenceError(
                    f"non-finite loss {res.value} at epoch {epoch}, step {log.steps}, sample {idx}"
                )
            total += res.value
            opt.step(net.params, net.backward(cache, res.grad_logits), lr)
            log.steps += 1
        log.epoch_loss.append(total / len(dataset))
        log.lr.append(lr)
        if val is not None and ((epoch + 1) % val_every == 0 or epoch + 1 == epochs):
            log.val.append({"epoch": epoch + 1, **evaluate(net, val, **(eval_kwargs or {})).as_dict()})
    return log


class GradCheck(NamedTuple):
    error: float  # largest relative error over the checked coordinates
    checked: int
    skipped: int  # coordinates whose perturbation flipped a ReLU


def check_param_gradient_detail(net: TinyNet, image, labels, loss_fn, n_samples: int = 100, epsilon: float = 1e-5,
                                seed: int = 0) -> GradCheck:
    """Backprop against central differences on ``n_samples`` parameter coordinates.

    Coordinates are visited in a seeded random order. One whose +/- epsilon
    step changes any ReLU on/off pattern straddles a kink where the loss is
    not differentiable; it is skipped and the next coordinate is drawn, so
    ``checked`` reaches ``n_samples`` unless the parameters run out. Uses the
    same error measure as :func:`confwise.losses.check_gradient`.
    """

    def evaluate_at(with_grads):
        logits, cache = net.forward(image, return_cache=True)
        out = loss_fn(softmax_logits(logits), labels)
        res = out[0] if isinstance(out, tuple) else out
        pattern = (cache[1] > 0, cache[2] > 0)
        return res.value, (net.backward(cache, res.grad_logits) if with_grads else None), pattern

    _, grads, base = evaluate_at(True)
    names = list(net.params)
    sizes = np.array([net.params[k].size for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    floor = max(1e-3 * max(np.abs(g).max() for g in grads.values()), 1e-300)
    worst, checked, skipped = 0.0, 0, 0
    for flat in SplitMix64(seed).permutation(int(offsets[-1])):
        if checked >= n_samples:
            break
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[li]
        p = net.params[name].reshape(-1)
        j = int(flat - offsets[li])
        orig = p[j]
        p[j] = orig + epsilon
        up, _, pat_up = evaluate_at(False)
        p[j] = orig - epsilon
        down, _, pat_down = evaluate_at(False)
        p[j] = orig
        if any(not (np.array_equal(b, u) and np.array_equal(b, d)) for b, u, d in zip(base, pat_up, pat_down)):
            skipped += 1
            continue
        num = (up - down) / (2 * epsilon)
        a = grads[name].reshape(-1)[j]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        checked += 1
    return GradCheck(worst, checked, skipped)


def check_param_gradient(net: TinyNet, image, labels, loss_fn, n_samples: int = 100, epsilon: float = 1e-5,
                         seed: int = 0) -> float:
    """Largest relative error from :func:`check_param_gradient_detail`."""
    return check_param_gradient_detail(net, image, labels, loss_fn, n_samples, epsilon, seed).error
