"""Segmentation objective and evaluation metrics.

Losses operate on probability tensors (differentiable); metrics operate on
binary numpy masks.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from .errors import ShapeError, ValidationError
from .tensor import Tensor, add, clip, log, mean, mul, sub, tsum

LOG_EPS = 1e-7
DICE_EPS = 1e-6


def _target(t, like: Tensor) -> np.ndarray:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t)
    if arr.shape != like.shape:
        raise ShapeError(f"prediction {like.shape} and target {arr.shape} differ")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValidationError("target must be strictly binary")
    return arr.astype(like.dtype)


def bce_loss(p: Tensor, t) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[eps, 1 - eps]``."""
    tt = _target(t, p)
    pc = clip(p, LOG_EPS, 1.0 - LOG_EPS)
    ll = add(mul(Tensor(tt), log(pc)), mul(Tensor(1.0 - tt), log(sub(1.0, pc))))
    return mul(mean(ll), -1.0)


def dice_loss(p: Tensor, t) -> Tensor:
    """``1 - 2 sum(t p) / (sum(t^2) + sum(p^2))``.

    For inputs with more than one axis the first axis is a batch axis: the
    loss is computed per sample and averaged.  The denominator is floored at
    ``DICE_EPS``; a sample whose prediction and target are both all-zero has
    loss 0.
    """
    tt = _target(t, p)
    axes = tuple(range(1, p.ndim)) if p.ndim > 1 else None
    tt_t = Tensor(tt)
    num = tsum(mul(tt_t, p), axis=axes)
    den = add(tsum(mul(tt_t, tt_t), axis=axes), tsum(mul(p, p), axis=axes))
    empty = (den.data == 0).astype(p.dtype)
    ratio = mul(num, 2.0) / clip(den, DICE_EPS, math.inf)
    per_sample = mul(sub(1.0, ratio), Tensor(1.0 - empty))
    return mean(per_sample)


def combined_loss(p: Tensor, t) -> Tensor:
    """Unweighted Dice + BCE."""
    return add(dice_loss(p, t), bce_loss(p, t))


# ---------------------------------------------------------------------------
# metrics

def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.dtype != bool and not np.all((arr == 0) | (arr == 1)):
        raise ValidationError(f"{name} must be binary")
    return arr.astype(bool)


def binarize(prob, threshold: float = 0.5) -> np.ndarray:
    """``prob >= threshold`` as a uint8 mask."""
    arr = np.asarray(prob.data if isinstance(prob, Tensor) else prob)
    return (arr >= threshold).astype(np.uint8)


def dsc(pred_mask, gt_mask) -> float:
    """Dice similarity coefficient; two empty masks score 1."""
    p, t = _binary(pred_mask, "pred_mask"), _binary(gt_mask, "gt_mask")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    size = int(p.sum()) + int(t.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / size


def boundary_points(mask) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour, or on the image border.

    Returns integer ``(row, col)`` coordinates, shape ``[K, 2]``.
    """
    m = _binary(mask, "mask")
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~interior)


def hausdorff_flagged(pred_mask, gt_mask, spacing: float = 1.0) -> tuple[float, bool]:
    """Exact symmetric Hausdorff distance between mask boundaries.

    Returns ``(distance, sentinel)``.  When exactly one boundary is empty the
    distance is the image diagonal and ``sentinel`` is True; two empty masks
    are at distance 0.
    """
    p, t = _binary(pred_mask, "pred_mask"), _binary(gt_mask, "gt_mask")
    if p.shape != t.shape:
        raise ShapeError(f"mask shapes differ: {p.shape} vs {t.shape}")
    bp, bt = boundary_points(p), boundary_points(t)
    if len(bp) == 0 and len(bt) == 0:
        return 0.0, False
    if len(bp) == 0 or len(bt) == 0:
        return float(math.hypot(*p.shape)) * spacing, True
    d_pt = cKDTree(bt).query(bp)[0].max()
    d_tp = cKDTree(bp).query(bt)[0].max()
    return float(max(d_pt, d_tp)) * spacing, False


def hausdorff(pred_mask, gt_mask, spacing: float = 1.0) -> float:
    return hausdorff_flagged(pred_mask, gt_mask, spacing)[0]
