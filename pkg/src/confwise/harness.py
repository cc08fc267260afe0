"""Experiment configs, training cells, result tables and corpus evaluation."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import math
import os
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from importlib import resources

import numpy as np

from . import __version__
from .losses import LOSS_NAMES, make_loss
from .metrics import bece, ece, export_reliability, merge_reports, seg_scores
from .model import TinyNet, evaluate, train
from .synth import SynthConfig, generate
from .tensor_io import check_labels, one_hot, read_tensor

PRESETS = ("alpha_sweep", "q_sweep", "combos", "directional")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "default"
    loss: str = "acw"
    alpha: float = 0.4
    q: float = 0.8
    scope: str = "per_class"
    literal_percentile: bool = False
    include_background: bool = True
    ce_at_zero: bool = False
    gamma: float = 2.0
    tversky_a: float = 0.3
    tversky_b: float = 0.7
    gamma_ft: float = 0.75
    smooth: float = 1e-5
    combo_weight: float = 0.5
    bins: int = 10
    radius: int = 2
    shape: str = "square"
    base_lr: float = 0.0015
    epochs: int = 30
    seeds: tuple = (0, 1, 2, 3, 4)
    flip: bool = True
    dtype: str = "float64"
    n_samples: int = 200
    height: int = 64
    width: int = 64
    ring_thickness: int = 2
    boundary_blur_sigma: float = 1.5
    noise_sigma: float = 0.05
    artifact_prob: float = 0.2
    data_seed: int = 0
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}; choose from {', '.join(LOSS_NAMES)}")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must lie in (0, 1)")
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")

    def synth(self) -> SynthConfig:
        return SynthConfig(
            height=self.height,
            width=self.width,
            ring_thickness=self.ring_thickness,
            boundary_blur_sigma=self.boundary_blur_sigma,
            noise_sigma=self.noise_sigma,
            artifact_prob=self.artifact_prob,
            seed=self.data_seed,
        )

    def loss_fn(self):
        return make_loss(
            self.loss,
            alpha=self.alpha,
            q=self.q,
            scope=self.scope,
            literal_percentile=self.literal_percentile,
            include_background=self.include_background,
            ce_at_zero=self.ce_at_zero,
            gamma=self.gamma,
            tversky_a=self.tversky_a,
            tversky_b=self.tversky_b,
            gamma_ft=self.gamma_ft,
            smooth=self.smooth,
            combo_weight=self.combo_weight,
        )

    def to_items(self) -> dict:
        """Flat ``key -> text`` form, the same one the INI reader accepts."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    def serialize(self) -> str:
        return "; ".join(f"{k}={v}" for k, v in self.to_items().items())

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


_FIELDS = {f.name: f for f in fields(ExperimentConfig)}
_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key: str, text: str):
    if key not in _FIELDS:
        raise ValueError(f"unknown config key {key!r}")
    default = _FIELDS[key].default
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low not in _TRUE | _FALSE:
            raise ValueError(f"{key}: expected a boolean, got {text!r}")
        return low in _TRUE
    if isinstance(default, tuple):
        return tuple(int(s) for s in re.split(r"[,\s]+", text) if s)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_from_items(items: dict, base: ExperimentConfig | None = None) -> ExperimentConfig:
    base = base or ExperimentConfig()
    return base.replace(**{k: _coerce(k, v) for k, v in items.items()})


def parse_overrides(pairs) -> dict:
    """``["alpha=0.2", "epochs=5"]`` -> dict; used for ``--set`` flags."""
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ValueError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read_ini(text: str, source: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ValueError(f"{source}: {exc}") from None
    return cp


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Single-experiment INI: an ``[experiment]`` section of ``key = value`` lines."""
    with open(path) as fh:
        cp = _read_ini(fh.read(), os.fspath(path))
    items = dict(cp["experiment"]) if cp.has_section("experiment") else {}
    items.update(overrides or {})
    return config_from_items(items)


def parse_matrix(text: str, source: str = "<matrix>", overrides: dict | None = None) -> list:
    """Matrix INI: ``[defaults]`` plus one ``[cell NAME]`` section per configuration.

    Overrides apply on top of every cell.
    """
    cp = _read_ini(text, source)
    defaults = dict(cp["defaults"]) if cp.has_section("defaults") else {}
    cells = []
    for sec in cp.sections():
        if not sec.startswith("cell "):
            if sec != "defaults":
                raise ValueError(f"{source}: unknown section [{sec}]")
            continue
        items = {**defaults, **dict(cp[sec]), **(overrides or {})}
        items.setdefault("name", sec[5:].strip())
        cells.append(config_from_items(items))
    if not cells:
        raise ValueError(f"{source}: matrix has no [cell ...] sections")
    names = [c.name for c in cells]
    if len(set(names)) != len(names):
        raise ValueError(f"{source}: duplicate cell names")
    return cells


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("confwise").joinpath("configs", f"{name}.ini").read_text()


def load_matrix(path_or_preset, overrides: dict | None = None) -> list:
    if os.path.exists(path_or_preset):
        with open(path_or_preset) as fh:
            return parse_matrix(fh.read(), os.fspath(path_or_preset), overrides)
    return parse_matrix(preset_text(path_or_preset), f"preset:{path_or_preset}", overrides)


# --- running cells ------------------------------------------------------------

def split_dataset(samples, train_fraction: float = 0.8):
    """First ``round(train_fraction * n)`` samples train, the rest test."""
    k = int(round(train_fraction * len(samples)))
    k = min(max(k, 1), len(samples) - 1)
    return samples[:k], samples[k:]


@dataclass
class CellResult:
    config: ExperimentConfig
    seed: int
    status: str = "ok"
    metrics: dict = field(default_factory=dict)
    log: object = None
    net: object = None


def run_cell(cfg: ExperimentConfig, seed: int, keep_net: bool = False) -> CellResult:
    samples = generate(cfg.synth(), cfg.n_samples)
    train_set, test_set = split_dataset(samples, cfg.train_fraction)
    net = TinyNet(4, seed=seed, dtype=np.dtype(cfg.dtype))
    log = train(net, train_set, cfg.loss_fn(), cfg.epochs, seed=seed, base_lr=cfg.base_lr, flip=cfg.flip)
    res = evaluate(net, test_set, cfg.bins, cfg.radius, cfg.shape)
    metrics = res.as_dict()
    metrics["final_loss"] = log.epoch_loss[-1] if log.epoch_loss else math.nan
    return CellResult(cfg, seed, "ok", metrics, log, net if keep_net else None)


def _run_cell_safe(args):
    cfg, seed = args
    try:
        return run_cell(cfg, seed)
    except Exception as exc:  # recorded per row; other cells continue
        return CellResult(cfg, seed, f"error: {type(exc).__name__}: {exc}")


def run_matrix(cells, jobs: int = 1, progress=None) -> list:
    """Run every (cell, seed) pair; results come back in matrix order regardless of ``jobs``."""
    tasks = [(c, s) for c in cells for s in c.seeds]
    if jobs <= 1:
        out = []
        for t in tasks:
            out.append(_run_cell_safe(t))
            if progress:
                progress(out[-1])
        return out
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        out = []
        for r in pool.map(_run_cell_safe, tasks):
            out.append(r)
            if progress:
                progress(r)
        return out


# --- results tables -----------------------------------------------------------

METRIC_COLUMNS = ("dsc_0", "dsc_1", "dsc_2", "dsc_3", "mean_dsc", "mean_iou", "hd95", "ece", "bece", "final_loss")
RESULT_HEADER = ("config", "seed", "status") + METRIC_COLUMNS


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def provenance_lines(configs) -> list:
    lines = [f"# confwise version: {__version__}"]
    seen = set()
    for c in configs:
        if c.name not in seen:
            seen.add(c.name)
            lines.append(f"# config {c.name}: {c.serialize()}")
    return lines


def result_rows(results) -> list:
    rows = []
    for r in results:
        row = [r.config.name, str(r.seed), r.status]
        row += [_fmt(r.metrics.get(k)) for k in METRIC_COLUMNS]
        rows.append(row)
    return rows


def aggregate(results) -> list:
    """Per config: (name, n_ok, {metric: (mean, stdev)}). Stdev is the sample stdev (0 for one seed)."""
    out, order = {}, []
    for r in results:
        if r.config.name not in out:
            out[r.config.name] = []
            order.append(r.config.name)
        if r.status == "ok":
            out[r.config.name].append(r.metrics)
    agg = []
    for name in order:
        ms = out[name]
        stats = {}
        for k in METRIC_COLUMNS:
            vals = [m[k] for m in ms if k in m and not math.isnan(m[k])]
            if not vals:
                stats[k] = (math.nan, math.nan)
                continue
            mean = math.fsum(vals) / len(vals)
            sd = statistics.stdev(vals) if len(vals) > 1 else 0.0
            stats[k] = (mean, sd)
        agg.append((name, len(ms), stats))
    return agg


def write_results(path, results, configs) -> None:
    with open(path, "w", newline="") as fh:
        for line in provenance_lines(configs):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULT_HEADER)
        w.writerows(result_rows(results))


def write_aggregate(path, agg, configs) -> None:
    with open(path, "w", newline="") as fh:
        for line in provenance_lines(configs):
            fh.write(line + "\n")
        w = csv.writer(fh, lineterminator="\n")
        header = ["config", "n"]
        for k in METRIC_COLUMNS:
            header += [f"{k}_mean", f"{k}_std"]
        w.writerow(header)
        for name, n, stats in agg:
            row = [name, n]
            for k in METRIC_COLUMNS:
                row += [_fmt(stats[k][0]), _fmt(stats[k][1])]
            w.writerow(row)


def render_table(agg) -> str:
    """Fixed-width table; overlap and calibration scores shown x100."""
    cols = [("ring DSC", "dsc_1", 100), ("mDSC", "mean_dsc", 100), ("mIoU", "mean_iou", 100),
            ("HD95", "hd95", 1), ("ECE", "ece", 100), ("BECE", "bece", 100)]
    width = max([len("config")] + [len(a[0]) for a in agg])
    buf = io.StringIO()
    buf.write(f"{'config':<{width}}  {'n':>2}" + "".join(f"  {c[0]:>15}" for c in cols) + "\n")
    for name, n, stats in agg:
        buf.write(f"{name:<{width}}  {n:>2}")
        for _, key, scale in cols:
            m, s = stats[key]
            cell = "n/a" if math.isnan(m) else f"{m * scale:.2f} ± {s * scale:.2f}"
            buf.write(f"  {cell:>15}")
        buf.write("\n")
    return buf.getvalue()


# --- corpus evaluation --------------------------------------------------------

_INDEX = re.compile(r"(\d+)\.segt$")


def index_files(directory, prefix: str = "") -> dict:
    """Map trailing integer index -> path for ``PREFIX*NNNNN.segt`` files."""
    out = {}
    for name in sorted(os.listdir(directory)):
        m = _INDEX.search(name) if name.startswith(prefix) else None
        if m:
            idx = int(m.group(1))
            if idx in out:
                raise ValueError(f"{directory}: two files share index {idx}")
            out[idx] = os.path.join(directory, name)
    return out


class MissingPairError(ValueError):
    def __init__(self, index, side):
        self.index = index
        super().__init__(f"index {index:05d} has no matching {side} file")


def as_probs(pred, num_classes: int | None = None) -> np.ndarray:
    """Probability map from either a [C,H,W] float map or an [H,W] label map (one-hot)."""
    pred = np.asarray(pred)
    if pred.ndim == 2:
        if num_classes is None:
            raise ValueError("num_classes is required for label-map predictions")
        return one_hot(pred, num_classes)
    return pred


@dataclass
class CorpusEval:
    per_image: list  # (index, SegScores, ece report, bece report)
    ece: object
    bece: object
    num_classes: int


def evaluate_corpus(
    pred_dir, label_dir, bins=10, radius=2, shape="square", num_classes=None, pred_prefix="", label_prefix="lbl_"
) -> CorpusEval:
    preds, labels = index_files(pred_dir, pred_prefix), index_files(label_dir, label_prefix)
    if not preds:
        raise FileNotFoundError(f"{pred_dir}: no .segt files")
    for idx in sorted(set(preds) | set(labels)):
        if idx not in labels:
            raise MissingPairError(idx, "label")
        if idx not in preds:
            raise MissingPairError(idx, "prediction")
    per = []
    for idx in sorted(preds):
        gt = read_tensor(labels[idx])
        raw = read_tensor(preds[idx])
        C = num_classes or (raw.shape[0] if raw.ndim == 3 else int(max(raw.max(), gt.max())) + 1)
        probs = as_probs(raw, C)
        if probs.shape[1:] != gt.shape:
            raise ValueError(f"index {idx:05d}: prediction {probs.shape} and label {gt.shape} disagree")
        gt = check_labels(gt, probs.shape[0])
        sc = seg_scores(probs.argmax(axis=0), gt, probs.shape[0])
        per.append((idx, sc, ece(probs, gt, bins), bece(probs, gt, bins, radius, shape)))
    Cs = {p[1].dsc.size for p in per}
    if len(Cs) != 1:
        raise ValueError("images disagree on the number of classes")
    return CorpusEval(per, merge_reports(p[2] for p in per), merge_reports(p[3] for p in per), Cs.pop())


def write_corpus(ev: CorpusEval, out_dir, meta: dict | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    header = [f"# confwise version: {__version__}"] + [f"# {k}: {v}" for k, v in (meta or {}).items()]
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        fh.write("\n".join(header) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "class", "dsc", "iou", "hd95"])
        for idx, sc, _, _ in ev.per_image:
            for c in range(ev.num_classes):
                w.writerow([idx, c, repr(float(sc.dsc[c])), repr(float(sc.iou[c])), repr(float(sc.hd95[c]))])
        for c in range(ev.num_classes):
            col = [p[1] for p in ev.per_image]
            w.writerow(["mean", c] + [repr(float(np.mean([getattr(s, k)[c] for s in col]))) for k in ("dsc", "iou", "hd95")])
    with open(os.path.join(out_dir, "calibration.csv"), "w", newline="") as fh:
        fh.write("\n".join(header) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "ece", "bece", "n", "n_boundary"])
        for idx, _, e, b in ev.per_image:
            w.writerow([idx, repr(e.score), repr(b.score), e.n, b.n])
        w.writerow(["pooled", repr(ev.ece.score), repr(ev.bece.score), ev.ece.n, ev.bece.n])
    meta = {"confwise version": __version__, **(meta or {})}
    export_reliability(ev.ece, os.path.join(out_dir, "reliability_ece.csv"),
                       os.path.join(out_dir, "reliability_ece.svg"), meta)
    export_reliability(ev.bece, os.path.join(out_dir, "reliability_bece.csv"),
                       os.path.join(out_dir, "reliability_bece.svg"), meta)
