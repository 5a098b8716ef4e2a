"""Dice coefficient/loss machinery.

The smoothed Dice coefficient over a prediction map p in [0,1] and a binary
truth map y is (2*sum(p*y) + eps) / (sum(p) + sum(y) + eps); the loss is one
minus that. Sums pool over every pixel of the batch by default (a per-image
mode is available). The multi-class loss sums one Dice loss per foreground
class and never touches the background channel; when an auxiliary
foreground-union score map is supplied, its loss enters the total with weight
equal to the class count so both heads pull with similar magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Node
from .errors import ConfigError, ShapeError


@dataclass
class DiceConfig:
    epsilon: float = 1e-6
    per_image: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")


@dataclass
class LossBreakdown:
    per_class: list[float]
    auxiliary: float | None
    total: float


def _check_ranges(pred, truth):
    if pred.shape != truth.shape:
        raise ShapeError(f"pred shape {pred.shape} != truth shape {truth.shape}")
    if pred.min() < -1e-6 or pred.max() > 1 + 1e-6:
        raise ShapeError(
            f"predictions must lie in [0, 1], got range "
            f"[{pred.min():.4g}, {pred.max():.4g}]")


def dice_coefficient(pred, truth, config: DiceConfig | None = None) -> float:
    """Smoothed, batch-pooled Dice coefficient; differentiable in pred."""
    config = config or DiceConfig()
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    _check_ranges(pred, truth)
    eps = config.epsilon
    return float((2.0 * (pred * truth).sum() + eps)
                 / (pred.sum() + truth.sum() + eps))


def _dice_loss_and_grad(pred, truth, eps):
    """Returns (loss, dloss/dpred) for one pooled Dice term."""
    p = pred.astype(np.float64, copy=False)
    y = truth.astype(np.float64, copy=False)
    num = 2.0 * (p * y).sum() + eps
    den = p.sum() + y.sum() + eps
    loss = 1.0 - num / den
    grad = (num / (den * den)) - (2.0 * y) / den
    return loss, grad


def dice_loss(g, pred, truth, config: DiceConfig | None = None):
    """Dice loss as a graph node (when pred is a Node) or a float.

    truth must be binary and match pred's shape.
    """
    config = config or DiceConfig()
    is_node = isinstance(pred, Node)
    pdata = pred.data if is_node else np.asarray(pred)
    truth = np.asarray(truth)
    _check_ranges(pdata, truth)

    if config.per_image and pdata.ndim == 4:
        n = pdata.shape[0]
        losses, grads = zip(*(_dice_loss_and_grad(pdata[i], truth[i], config.epsilon)
                              for i in range(n)))
        loss = float(np.mean(losses))
        grad = np.stack(grads) / n
    else:
        loss, grad = _dice_loss_and_grad(pdata, truth, config.epsilon)

    if not is_node:
        return loss
    out = Node(np.asarray(loss))

    def bwd():
        if out.grad is None:
            return
        pred.ensure_grad()[...] += (float(out.grad) * grad).astype(pdata.dtype)

    if g is not None:
        g.record(bwd)
    return out


def multiclass_dice_loss(g, probabilities, truth_labels, head_kind: str,
                         aux_scores=None, config: DiceConfig | None = None,
                         aux_truth=None):
    """Per-foreground-class Dice losses plus optional weighted auxiliary term.

    head_kind selects the channel layout: 'softmax' expects C+1 channels with
    the background in slice 0 (which receives no loss), 'sigmoid' expects C
    channels with class c in slice c-1. The auxiliary target defaults to the
    union of all foreground labels; aux_truth overrides it (binary map).
    Returns (LossBreakdown, total Node or None when inputs are plain arrays).
    """
    config = config or DiceConfig()
    is_node = isinstance(probabilities, Node)
    probs = probabilities.data if is_node else np.asarray(probabilities)
    labels = np.asarray(truth_labels)
    if head_kind not in ("softmax", "sigmoid"):
        raise ConfigError(f"unknown head kind {head_kind!r}")
    num_classes = probs.shape[-1] - 1 if head_kind == "softmax" else probs.shape[-1]
    if num_classes < 1:
        raise ShapeError(f"{head_kind} head needs at least "
                         f"{2 if head_kind == 'softmax' else 1} channels, "
                         f"got {probs.shape[-1]}")
    if labels.max(initial=0) > num_classes:
        raise ShapeError(
            f"label {labels.max()} exceeds class count {num_classes} for the "
            f"{head_kind} head with {probs.shape[-1]} channels")
    if labels.shape != probs.shape[:-1]:
        raise ShapeError(
            f"label map shape {labels.shape} does not match probability "
            f"spatial shape {probs.shape[:-1]}")

    per_class = []
    grad = np.zeros_like(probs, dtype=np.float64) if is_node else None
    for c in range(1, num_classes + 1):
        ch = c if head_kind == "softmax" else c - 1
        target = (labels == c).astype(np.float64)
        if config.per_image and probs.ndim == 4:
            n = probs.shape[0]
            vals = []
            for i in range(n):
                loss_i, grad_i = _dice_loss_and_grad(probs[i, ..., ch],
                                                     target[i], config.epsilon)
                vals.append(loss_i)
                if grad is not None:
                    grad[i, ..., ch] += grad_i / n
            per_class.append(float(np.mean(vals)))
        else:
            loss_c, grad_c = _dice_loss_and_grad(probs[..., ch], target,
                                                 config.epsilon)
            per_class.append(loss_c)
            if grad is not None:
                grad[..., ch] = grad_c

    aux_val = None
    aux_node = None
    if aux_scores is not None:
        union = (np.asarray(aux_truth) > 0).astype(np.float64) if aux_truth is not None \
            else (labels > 0).astype(np.float64)
        aux_is_node = isinstance(aux_scores, Node)
        adata = aux_scores.data if aux_is_node else np.asarray(aux_scores)
        if adata.shape[-1] == 1 and adata.ndim == union.ndim + 1:
            union = union[..., None]
        if aux_is_node:
            aux_node = dice_loss(g, aux_scores, union, config)
            aux_val = float(aux_node.data)
        else:
            aux_val = dice_loss(None, adata, union, config)

    total = float(sum(per_class)) + (num_classes * aux_val if aux_val is not None else 0.0)
    breakdown = LossBreakdown(per_class=per_class, auxiliary=aux_val, total=total)

    if not is_node:
        return breakdown, None

    main = Node(np.asarray(float(sum(per_class))))

    def bwd():
        if main.grad is None:
            return
        probabilities.ensure_grad()[...] += (float(main.grad) * grad).astype(probs.dtype)

    if g is not None:
        g.record(bwd)

    if aux_node is not None:
        from .autodiff import weighted_sum
        total_node = weighted_sum(g, [main, aux_node], [1.0, float(num_classes)])
    else:
        total_node = main
    return breakdown, total_node


@dataclass
class DegenerateBoundReport:
    batch_count: int
    bound: float
    degenerate_avg_loss: float
    honest_avg_loss: float


def degenerate_bound_analysis(k: int, batch_pixels: int,
                              config: DiceConfig | None = None,
                              foreground_coverage: float = 0.5) -> DegenerateBoundReport:
    """Simulates k batches with foreground in exactly one of them.

    The all-zeros predictor's average loss stays at or below 1/k because the
    empty batches cost it nothing, while a fixed everywhere-0.5 predictor pays
    nearly full loss on every empty batch and so averages above 1/k.
    """
    if k < 2:
        raise ConfigError(f"need at least 2 batches, got k={k}")
    if batch_pixels < 2:
        raise ConfigError(f"need at least 2 pixels per batch, got {batch_pixels}")
    config = config or DiceConfig()
    fg_pixels = max(1, int(round(batch_pixels * foreground_coverage)))
    truth_fg = np.zeros(batch_pixels)
    truth_fg[:fg_pixels] = 1.0
    truth_empty = np.zeros(batch_pixels)

    def avg_loss(pred_value):
        pred = np.full(batch_pixels, pred_value)
        losses = [1.0 - dice_coefficient(pred, truth_fg, config)]
        losses += [1.0 - dice_coefficient(pred, truth_empty, config)] * (k - 1)
        return float(np.mean(losses))

    return DegenerateBoundReport(
        batch_count=k,
        bound=1.0 / k,
        degenerate_avg_loss=avg_loss(0.0),
        honest_avg_loss=avg_loss(0.5),
    )
