"""Segmentation metrics over two classes (background, foreground).

All headline numbers are class means: mIoU averages background and
foreground IoU, and likewise for recall, precision, and F1; the
foreground-only values ride along in the report. Degenerate ratios
follow 0/0 -> 0 for recall/precision/F1 and 0/0 -> 1 for IoU (an absent
class predicted absent is a perfect call).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import ops
from .recurrent import recurrent_forward
from .tensor import ConfigError, ShapeError, Tensor, no_grad


@dataclasses.dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def merge(self, other: "ConfusionCounts"):
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        self.tn += other.tn

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion_counts(prob: np.ndarray, gt: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    if prob.shape != gt.shape:
        raise ShapeError(
            f"confusion: prediction shape {prob.shape} != ground truth {gt.shape}"
        )
    pred = prob > threshold
    fg = gt > 0.5
    tp = int(np.count_nonzero(pred & fg))
    fp = int(np.count_nonzero(pred & ~fg))
    fn = int(np.count_nonzero(~pred & fg))
    tn = pred.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def _iou(inter: int, union: int) -> float:
    return inter / union if union else 1.0


def _f1(precision: float, recall: float) -> float:
    s = precision + recall
    return 2.0 * precision * recall / s if s else 0.0


@dataclasses.dataclass
class MetricsReport:
    threshold: float
    counts: ConfusionCounts
    miou: float
    mrec: float
    mprec: float
    mf1: float
    fg_iou: float
    fg_recall: float
    fg_precision: float
    fg_f1: float
    pr_breakeven: float | None = None
    iteration: int | None = None
    loss: float | None = None
    param_count: int | None = None
    latency_ms: float | None = None


def metrics_from_counts(c: ConfusionCounts, threshold: float = 0.5) -> MetricsReport:
    fg_iou = _iou(c.tp, c.tp + c.fp + c.fn)
    bg_iou = _iou(c.tn, c.tn + c.fn + c.fp)
    fg_rec = _rate(c.tp, c.tp + c.fn)
    bg_rec = _rate(c.tn, c.tn + c.fp)
    fg_prec = _rate(c.tp, c.tp + c.fp)
    bg_prec = _rate(c.tn, c.tn + c.fn)
    fg_f1 = _f1(fg_prec, fg_rec)
    bg_f1 = _f1(bg_prec, bg_rec)
    return MetricsReport(
        threshold=threshold,
        counts=c,
        miou=(fg_iou + bg_iou) / 2.0,
        mrec=(fg_rec + bg_rec) / 2.0,
        mprec=(fg_prec + bg_prec) / 2.0,
        mf1=(fg_f1 + bg_f1) / 2.0,
        fg_iou=fg_iou,
        fg_recall=fg_rec,
        fg_precision=fg_prec,
        fg_f1=fg_f1,
    )


def compute_metrics(prob, gt, threshold: float = 0.5, with_breakeven: bool = True) -> MetricsReport:
    """Score a probability map (or a batch) against a binary ground truth."""
    prob = prob.data if isinstance(prob, Tensor) else np.asarray(prob)
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if prob.shape != gt.shape:
        raise ShapeError(f"metrics: shapes {prob.shape} and {gt.shape} differ")
    if prob.size and (prob.min() < 0 or prob.max() > 1):
        raise ConfigError("metrics: probabilities must lie in [0, 1]")
    uniq = np.unique(gt)
    if not np.isin(uniq, (0.0, 1.0)).all():
        raise ConfigError(
            f"metrics: ground truth must be binary, found values {uniq[:5]}"
        )
    report = metrics_from_counts(confusion_counts(prob, gt, threshold), threshold)
    if with_breakeven:
        report.pr_breakeven = pr_breakeven(prob, gt)
    return report


def pr_breakeven(prob: np.ndarray, gt: np.ndarray, n_thresholds: int = 256) -> float:
    """Foreground precision where the precision and recall curves cross.

    Sweeps evenly spaced thresholds and linearly interpolates the
    precision at the sign change of (precision - recall).
    """
    fg = gt.reshape(-1) > 0.5
    p_fg = np.sort(prob.reshape(-1)[fg])
    p_bg = np.sort(prob.reshape(-1)[~fg])
    n_fg = p_fg.size
    if n_fg == 0:
        return 0.0
    taus = np.linspace(0.0, 1.0, n_thresholds)
    tp = n_fg - np.searchsorted(p_fg, taus, side="right")
    fp = p_bg.size - np.searchsorted(p_bg, taus, side="right")
    denom = tp + fp
    precision = np.divide(tp, denom, out=np.zeros_like(taus), where=denom > 0)
    recall = tp / n_fg
    diff = precision - recall
    if diff[0] >= 0:
        return float(precision[0])
    cross = np.nonzero(diff >= 0)[0]
    if cross.size == 0:
        return float(precision[np.argmin(np.abs(diff))])
    i = int(cross[0])
    d0, d1 = diff[i - 1], diff[i]
    frac = -d0 / (d1 - d0) if d1 != d0 else 1.0
    return float(precision[i - 1] + frac * (precision[i] - precision[i - 1]))


def evaluate(
    model,
    samples,
    iterations: int | None = None,
    batch_size: int = 4,
    threshold: float = 0.5,
    with_breakeven: bool = True,
) -> list[MetricsReport]:
    """Per-iteration metrics over a sample list (whole-image inference)."""
    if not samples:
        raise ConfigError("evaluate: empty split")
    n_iter = iterations if iterations is not None else model.config.iterations
    counts = [ConfusionCounts() for _ in range(n_iter)]
    probs: list[list[np.ndarray]] = [[] for _ in range(n_iter)]
    gts: list[np.ndarray] = []
    loss_sums = [0.0] * n_iter
    n_batches = 0
    with no_grad():
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo : lo + batch_size]
            x = Tensor(np.stack([s.image for s in chunk]))
            y = np.stack([s.mask for s in chunk]).astype(np.float32)
            logits_list = recurrent_forward(model, x, n_iter)
            gts.append(y.reshape(-1))
            for t, lg in enumerate(logits_list):
                prob = ops._sigmoid(lg.data)
                counts[t].merge(confusion_counts(prob, y, threshold))
                probs[t].append(prob.reshape(-1))
                loss_sums[t] += ops.bce_with_logits(lg, Tensor(y)).item()
            n_batches += 1
    gt_flat = np.concatenate(gts)
    reports = []
    for t in range(n_iter):
        rep = metrics_from_counts(counts[t], threshold)
        rep.iteration = t + 1
        rep.loss = loss_sums[t] / n_batches
        if with_breakeven:
            rep.pr_breakeven = pr_breakeven(np.concatenate(probs[t]), gt_flat)
        reports.append(rep)
    return reports


def predict_probabilities(model, image: np.ndarray, iterations: int | None = None) -> list[np.ndarray]:
    """Probability maps for one (C,H,W) image, one per iteration.

    Images whose sides are not multiples of 16 are reflect-padded for the
    network and the outputs cropped back.
    """
    from .data import reflect_pad_chw

    c, h, w = image.shape
    padded, (oh, ow) = reflect_pad_chw(image, 16)
    x = Tensor(padded[None].astype(np.float32))
    with no_grad():
        logits_list = recurrent_forward(model, x, iterations)
    return [ops._sigmoid(lg.data)[0, :, :h, :w] for lg in logits_list]


def evaluate_patched(
    model,
    samples,
    patch_size: int,
    patch_stride: int = 0,
    iterations: int | None = None,
    batch_size: int = 4,
    threshold: float = 0.5,
    with_breakeven: bool = True,
) -> list[MetricsReport]:
    """Sliding-window inference reassembled to full images before scoring."""
    from .data import extract_patch_grid, reassemble_patches

    if not samples:
        raise ConfigError("evaluate: empty split")
    n_iter = iterations if iterations is not None else model.config.iterations
    counts = [ConfusionCounts() for _ in range(n_iter)]
    probs: list[list[np.ndarray]] = [[] for _ in range(n_iter)]
    gts: list[np.ndarray] = []
    with no_grad():
        for sample in samples:
            patches, positions, padded_hw = extract_patch_grid(
                sample.image, patch_size, patch_stride
            )
            h, w = sample.image.shape[1:]
            canvases = []
            for lo in range(0, len(patches), batch_size):
                chunk = patches[lo : lo + batch_size]
                x = Tensor(np.stack(chunk).astype(np.float32))
                logits_list = recurrent_forward(model, x, n_iter)
                canvases.extend(
                    [ops._sigmoid(lg.data)[k] for lg in logits_list]
                    for k in range(len(chunk))
                )
            gts.append(sample.mask.reshape(-1))
            for t in range(n_iter):
                per_patch = [canvases[k][t] for k in range(len(patches))]
                full = reassemble_patches(per_patch, positions, padded_hw, (h, w))
                counts[t].merge(confusion_counts(full, sample.mask, threshold))
                probs[t].append(full.reshape(-1))
    gt_flat = np.concatenate(gts)
    reports = []
    for t in range(n_iter):
        rep = metrics_from_counts(counts[t], threshold)
        rep.iteration = t + 1
        if with_breakeven:
            rep.pr_breakeven = pr_breakeven(np.concatenate(probs[t]), gt_flat)
        reports.append(rep)
    return reports


def recurrent_forward(model, x, iterations):
    # local import to keep metrics importable without the model stack
    from .recurrent import recurrent_forward

    return recurrent_forward(model, x, iterations)
