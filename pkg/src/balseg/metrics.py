"""Prediction merge rules, confusion matrices, and F1 scores.

Softmax outputs merge by per-pixel argmax over all channels. Sigmoid outputs
merge through a foreground threshold: a pixel whose best class score does not
exceed t_fg becomes background, otherwise it takes the best-scoring class.
Ties break toward the lower class index everywhere. F1 aggregation treats the
foreground classes only; macro averages their per-class F1 uniformly, micro
pools their TP/FP/FN counts (a background-inclusive micro variant is also
reported since conventions differ).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass
class MergeConfig:
    fg_threshold: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.fg_threshold < 1.0:
            raise ConfigError(
                f"fg_threshold must be in (0, 1), got {self.fg_threshold}")


@dataclass
class EvalReport:
    confusion: np.ndarray           # (C+1, C+1) int counts, rows = truth
    per_class_f1: list[float]       # foreground classes 1..C
    micro_f1: float
    macro_f1: float
    micro_f1_with_background: float
    empty_truth_rows: list[int] = field(default_factory=list)
    zero_support_classes: list[int] = field(default_factory=list)


def merge_softmax(probabilities: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over C+1 normalized channels; ties pick the lowest index."""
    probs = np.asarray(probabilities)
    sums = probs.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=1e-4):
        worst = float(np.abs(sums - 1.0).max())
        raise ShapeError(
            f"softmax probabilities must sum to 1 per pixel "
            f"(worst deviation {worst:.3g})")
    return probs.argmax(axis=-1)


def merge_sigmoid(scores: np.ndarray, config: MergeConfig | None = None) -> np.ndarray:
    """Threshold merge: background unless the best class score exceeds t_fg
    (strictly); class indices are 1-based in the output labels."""
    config = config or MergeConfig()
    scores = np.asarray(scores)
    if scores.min() < 0.0 or scores.max() > 1.0:
        raise ShapeError(
            f"sigmoid scores must lie in [0, 1], got range "
            f"[{scores.min():.4g}, {scores.max():.4g}]")
    best = scores.max(axis=-1)
    labels = scores.argmax(axis=-1) + 1
    labels[best <= config.fg_threshold] = 0
    return labels


def confusion_matrix(pred_labels: np.ndarray, truth_labels: np.ndarray,
                     num_classes: int) -> np.ndarray:
    """Pixel counts, rows = truth class, cols = predicted class."""
    pred = np.asarray(pred_labels)
    truth = np.asarray(truth_labels)
    if pred.shape != truth.shape:
        raise ShapeError(
            f"prediction shape {pred.shape} != truth shape {truth.shape}")
    n = num_classes + 1
    if pred.max(initial=0) >= n or truth.max(initial=0) >= n:
        raise ShapeError(
            f"labels exceed class count {num_classes}: "
            f"pred max {pred.max()}, truth max {truth.max()}")
    flat = truth.astype(np.int64).ravel() * n + pred.astype(np.int64).ravel()
    return np.bincount(flat, minlength=n * n).reshape(n, n)


def normalize_rows(confusion: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Row percentages summing to 100; empty truth rows stay zero and are
    returned separately as flags."""
    counts = np.asarray(confusion, dtype=np.float64)
    row_sums = counts.sum(axis=1)
    empty = [int(i) for i in np.flatnonzero(row_sums == 0)]
    safe = np.where(row_sums == 0, 1.0, row_sums)
    return counts / safe[:, None] * 100.0, empty


def f1_scores(confusion: np.ndarray, num_classes: int):
    """(per_class_f1, micro_f1, macro_f1, micro_with_background, zero_support).

    Per-class F1 is 2TP/(2TP+FP+FN); classes with no support on either side
    score 0 and are flagged. Micro pools foreground TP/FP/FN only.
    """
    conf = np.asarray(confusion, dtype=np.int64)
    if conf.shape != (num_classes + 1, num_classes + 1):
        raise ShapeError(
            f"expected ({num_classes + 1})x({num_classes + 1}) confusion "
            f"matrix, got {conf.shape}")
    per_class = []
    zero_support = []
    tp_sum = fp_sum = fn_sum = 0
    for c in range(1, num_classes + 1):
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum() - tp)
        fn = int(conf[c, :].sum() - tp)
        denom = 2 * tp + fp + fn
        if denom == 0:
            per_class.append(0.0)
            zero_support.append(c)
        else:
            per_class.append(2.0 * tp / denom)
        tp_sum += tp
        fp_sum += fp
        fn_sum += fn
    micro_den = 2 * tp_sum + fp_sum + fn_sum
    micro = 2.0 * tp_sum / micro_den if micro_den else 0.0
    macro = float(np.mean(per_class)) if per_class else 0.0
    # background-inclusive variant for comparison across conventions
    tpb = tp_sum + int(conf[0, 0])
    fpb = fp_sum + int(conf[:, 0].sum() - conf[0, 0])
    fnb = fn_sum + int(conf[0, :].sum() - conf[0, 0])
    micro_bg_den = 2 * tpb + fpb + fnb
    micro_bg = 2.0 * tpb / micro_bg_den if micro_bg_den else 0.0
    return per_class, micro, macro, micro_bg, zero_support


def evaluate_labels(pred_labels: np.ndarray, truth_labels: np.ndarray,
                    num_classes: int) -> EvalReport:
    conf = confusion_matrix(pred_labels, truth_labels, num_classes)
    per_class, micro, macro, micro_bg, zero_support = f1_scores(conf, num_classes)
    _, empty_rows = normalize_rows(conf)
    return EvalReport(confusion=conf, per_class_f1=per_class, micro_f1=micro,
                      macro_f1=macro, micro_f1_with_background=micro_bg,
                      empty_truth_rows=empty_rows,
                      zero_support_classes=zero_support)


def format_confusion_table(confusion: np.ndarray) -> str:
    """Plain-text row-normalized percentage table (one row per truth class)."""
    norm, empty = normalize_rows(confusion)
    n = confusion.shape[0]
    names = ["background"] + [f"class_{c}" for c in range(1, n)]
    width = max(len(nm) for nm in names)
    lines = [" " * (width + 2) + "  ".join(f"{nm:>{width}}" for nm in names)]
    for i, nm in enumerate(names):
        row = "  ".join(f"{norm[i, j]:>{width}.1f}" for j in range(n))
        flag = "  (no pixels)" if i in empty else ""
        lines.append(f"{nm:>{width}}  {row}{flag}")
    return "\n".join(lines) + "\n"


def report_to_csv(report: EvalReport) -> str:
    """CSV rows: one per foreground class plus micro/macro summary lines."""
    lines = ["metric,class,value"]
    for c, f1 in enumerate(report.per_class_f1, start=1):
        lines.append(f"f1,{c},{f1:.6f}")
    lines.append(f"micro_f1,,{report.micro_f1:.6f}")
    lines.append(f"macro_f1,,{report.macro_f1:.6f}")
    lines.append(f"micro_f1_with_background,,{report.micro_f1_with_background:.6f}")
    return "\n".join(lines) + "\n"
