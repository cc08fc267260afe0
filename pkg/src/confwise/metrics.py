"""Overlap scores (DSC, IoU, HD95) and calibration errors (ECE, boundary ECE).

Calibration reports keep per-bin *sums* rather than means so reports from
several images merge exactly; ``merge_reports`` followed by scoring equals
pooling the pixels first.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .morphology import boundary_mask, hd95
from .tensor_io import check_labels, check_probs


@dataclass
class SegScores:
    dsc: np.ndarray  # per class
    iou: np.ndarray
    hd95: np.ndarray
    hd95_empty: np.ndarray  # per class: sentinel used

    @property
    def foreground(self):
        return slice(1, None) if len(self.dsc) > 1 else slice(None)

    @property
    def mean_dsc(self) -> float:
        return float(self.dsc[self.foreground].mean())

    @property
    def mean_iou(self) -> float:
        return float(self.iou[self.foreground].mean())

    @property
    def mean_hd95(self) -> float:
        return float(self.hd95[self.foreground].mean())


def seg_scores(pred_labels, gt_labels, num_classes: int, hd_sentinel: float | None = None) -> SegScores:
    """Per-class hard DSC, IoU and HD95; means are over the foreground classes 1..C-1."""
    pred = check_labels(pred_labels, num_classes)
    gt = check_labels(gt_labels, num_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    dsc, iou, hd, flag = (np.zeros(num_classes) for _ in range(4))
    for c in range(num_classes):
        p, g = pred == c, gt == c
        tp = np.count_nonzero(p & g)
        fp = np.count_nonzero(p & ~g)
        fn = np.count_nonzero(~p & g)
        if tp + fp + fn == 0:
            dsc[c] = iou[c] = 1.0
            continue
        dsc[c] = 2 * tp / (2 * tp + fp + fn)
        iou[c] = tp / (tp + fp + fn)
        r = hd95(p, g, hd_sentinel)
        hd[c], flag[c] = r.distance, r.empty
    return SegScores(dsc, iou, hd, flag.astype(bool))


@dataclass
class CalibrationReport:
    lo: np.ndarray
    hi: np.ndarray
    count: np.ndarray  # int64
    conf_sum: np.ndarray
    acc_sum: np.ndarray

    @property
    def M(self) -> int:
        return len(self.count)

    @property
    def n(self) -> int:
        return int(self.count.sum())

    @property
    def empty(self) -> bool:
        return self.n == 0

    @property
    def confidence(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.conf_sum / np.maximum(self.count, 1), np.nan)

    @property
    def accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.acc_sum / np.maximum(self.count, 1), np.nan)

    @property
    def score(self) -> float:
        """Sum over bins of ``|B_m| / n * |acc - conf|``; 0 for an empty report."""
        n = self.n
        if n == 0:
            return 0.0
        used = self.count > 0
        gap = np.abs(self.accuracy[used] - self.confidence[used])
        return float(np.sum(self.count[used] / n * gap))

    def bins(self):
        """Rows of (lo, hi, count, confidence, accuracy); empty bins carry NaN."""
        return list(zip(self.lo, self.hi, self.count, self.confidence, self.accuracy))


def bin_edges(M: int) -> np.ndarray:
    return np.arange(M + 1) / M


def bin_index(conf, M: int) -> np.ndarray:
    """Bin m covers ``(m/M, (m+1)/M]``; confidence 0 goes to the first bin."""
    idx = np.searchsorted(bin_edges(M), conf, side="left") - 1
    return np.clip(idx, 0, M - 1)


def calibration_report(conf, correct, M: int = 10) -> CalibrationReport:
    conf = np.asarray(conf, dtype=np.float64).ravel()
    correct = np.asarray(correct, dtype=np.float64).ravel()
    if M < 1:
        raise ValueError("M must be >= 1")
    idx = bin_index(conf, M)
    edges = bin_edges(M)
    return CalibrationReport(
        lo=edges[:-1].copy(),
        hi=edges[1:].copy(),
        count=np.bincount(idx, minlength=M).astype(np.int64),
        conf_sum=np.bincount(idx, weights=conf, minlength=M),
        acc_sum=np.bincount(idx, weights=correct, minlength=M),
    )


def merge_reports(reports) -> CalibrationReport:
    reports = list(reports)
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    if any(r.M != first.M for r in reports):
        raise ValueError("reports have different bin counts")
    return CalibrationReport(
        lo=first.lo.copy(),
        hi=first.hi.copy(),
        count=sum(r.count for r in reports),
        conf_sum=sum(r.conf_sum for r in reports),
        acc_sum=sum(r.acc_sum for r in reports),
    )


def _confidence_and_correct(probs, gt_labels):
    probs = check_probs(probs)
    gt = check_labels(gt_labels, probs.shape[0])
    if gt.shape != probs.shape[1:]:
        raise ValueError(f"shape mismatch: {gt.shape} vs {probs.shape}")
    # np.argmax breaks ties toward the lowest class index
    return probs.max(axis=0), probs.argmax(axis=0) == gt


def ece(probs, gt_labels, M: int = 10) -> CalibrationReport:
    conf, correct = _confidence_and_correct(probs, gt_labels)
    return calibration_report(conf, correct, M)


def bece(probs, gt_labels, M: int = 10, radius: int = 2, shape: str = "square", mask=None) -> CalibrationReport:
    """ECE restricted to the boundary band of ``gt_labels``.

    An explicit ``mask`` replaces the band. An empty band yields an empty
    report (``n == 0``, score 0).
    """
    conf, correct = _confidence_and_correct(probs, gt_labels)
    if mask is None:
        mask = boundary_mask(gt_labels, np.asarray(probs).shape[0], radius, shape)
    sel = np.asarray(mask).astype(bool)
    return calibration_report(conf[sel], correct[sel], M)


# --- reliability export -------------------------------------------------------

RELIABILITY_HEADER = ["bin_lo", "bin_hi", "count", "confidence", "accuracy", "gap"]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


def export_reliability(report: CalibrationReport, path, svg_path=None, meta: dict | None = None) -> None:
    """Write one CSV row per bin; empty bins leave confidence/accuracy/gap blank.

    ``meta`` entries are written first as ``# key: value`` comment lines.
    """
    with open(path, "w", newline="") as fh:
        for k, v in (meta or {}).items():
            for line in str(v).splitlines() or [""]:
                fh.write(f"# {k}: {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RELIABILITY_HEADER)
        for lo, hi, count, conf, acc in report.bins():
            gap = abs(acc - conf) if count else math.nan
            w.writerow([repr(float(lo)), repr(float(hi)), int(count), _fmt(conf), _fmt(acc), _fmt(gap)])
    if svg_path is not None:
        with open(svg_path, "w") as fh:
            fh.write(reliability_svg(report))


def read_reliability(path):
    """Parse a reliability CSV back into (lo, hi, count, confidence, accuracy) rows."""
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    for rec in reader:
        def num(key):
            return float(rec[key]) if rec[key] != "" else math.nan
        rows.append((float(rec["bin_lo"]), float(rec["bin_hi"]), int(rec["count"]), num("confidence"), num("accuracy")))
    return rows


def reliability_svg(report: CalibrationReport, size: int = 320) -> str:
    pad = 30
    inner = size - 2 * pad
    bar_w = inner / report.M
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect x="{pad}" y="{pad}" width="{inner}" height="{inner}" fill="none" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad + inner}" x2="{pad + inner}" y2="{pad}" stroke="gray" stroke-dasharray="4"/>',
    ]
    for m, (lo, hi, count, conf, acc) in enumerate(report.bins()):
        if not count:
            continue
        x = pad + m * bar_w
        h = acc * inner
        parts.append(
            f'<rect x="{x:.2f}" y="{pad + inner - h:.2f}" width="{bar_w:.2f}" height="{h:.2f}" '
            f'fill="steelblue" stroke="white"><title>conf {conf:.3f} acc {acc:.3f} n {count}</title></rect>'
        )
    parts.append(f'<text x="{pad}" y="{size - 8}" font-size="11">confidence</text>')
    parts.append(f'<text x="4" y="{pad - 10}" font-size="11">accuracy (score {report.score:.4f})</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
