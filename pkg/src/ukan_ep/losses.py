"""Cross-entropy, foreground Dice loss and the dynamic per-sample weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn_ops import ShapeError
from .tensor import as_tensor

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5


def one_hot(labels, num_classes, dtype=np.float64):
    """``[B, *spatial]`` integer labels -> ``[B, C, *spatial]`` indicators."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"labels outside 0..{num_classes - 1}")
    out = np.zeros((labels.shape[0], num_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out


def _flatten(pred, truth):
    pred = as_tensor(pred)
    truth = np.asarray(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} and truth {truth.shape} differ")
    B, C = pred.shape[:2]
    return pred.reshape(B, C, -1), truth.reshape(B, C, -1)


def cross_entropy_loss(pred, truth, reduction="mean"):
    """Per-sample ``-sum_c y log p`` averaged (or summed) over voxels -> ``[B]``."""
    p, y = _flatten(pred, truth)
    ll = T.log(T.clip_min(p, PROB_FLOOR)) * y
    per_voxel = -T.reduce(ll, "sum", 1)
    if reduction == "mean":
        return T.reduce(per_voxel, "mean", 1)
    if reduction == "sum":
        return T.reduce(per_voxel, "sum", 1)
    raise ValueError(f"unknown reduction {reduction!r}")


def dice_loss(pred, truth):
    """Per-sample Dice loss pooled over foreground classes (index >= 1) -> ``[B]``."""
    p, y = _flatten(pred, truth)
    pf = p[:, 1:]
    yf = y[:, 1:]
    inter = T.reduce(pf * yf, "sum", (1, 2))
    denom = T.reduce(pf, "sum", (1, 2)) + yf.sum(axis=(1, 2))
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)


@dataclass
class LossBreakdown:
    ce: np.ndarray
    dice: np.ndarray
    alpha: np.ndarray
    total: float


def dynamic_weights(ce, dice):
    """``alpha_i = ce / (ce + dice)``, 0.5 where both vanish."""
    ce = np.asarray(ce, dtype=np.float64)
    dice = np.asarray(dice, dtype=np.float64)
    if (ce < 0).any() or (dice < 0).any():
        raise ValueError("losses must be non-negative")
    s = ce + dice
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(s > 0, ce / np.where(s > 0, s, 1.0), 0.5)


def dynamic_total_loss(ce, dice, mode="dynamic"):
    """Batch-mean of ``(1 - alpha) * ce + alpha * dice`` with alpha held constant.

    ``mode="fixed_half"`` pins alpha at 0.5.
    """
    ce, dice = as_tensor(ce), as_tensor(dice)
    if mode == "dynamic":
        alpha = dynamic_weights(ce.data, dice.data)
    elif mode == "fixed_half":
        if (ce.data < 0).any() or (dice.data < 0).any():
            raise ValueError("losses must be non-negative")
        alpha = np.full(ce.shape, 0.5)
    else:
        raise ValueError(f"unknown loss mode {mode!r}")
    a = T.Tensor(alpha, dtype=ce.dtype)
    per_sample = (1.0 - a) * ce + a * dice
    total = T.reduce(per_sample, "mean")
    breakdown = LossBreakdown(ce.data.astype(np.float64), dice.data.astype(np.float64), alpha, float(total.data))
    return total, breakdown


def segmentation_loss(logits, labels, mode="dynamic", ce_reduction="mean"):
    """Softmax over classes, then the weighted CE/Dice combination."""
    logits = as_tensor(logits)
    probs = T.softmax(logits, axis=1)
    y = one_hot(labels, logits.shape[1], dtype=logits.dtype)
    ce = cross_entropy_loss(probs, y, ce_reduction)
    dl = dice_loss(probs, y)
    return dynamic_total_loss(ce, dl, mode)
