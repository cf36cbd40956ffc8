"""Segmentation metrics and forward-value losses, bending energy and
black-box occlusion sensitivity maps."""
from __future__ import annotations

import itertools
import math

import numpy as np

from .core import MetaVolume


def _check_shapes(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def confusion_counts(pred: np.ndarray, truth: np.ndarray):
    """Per-class (tp, fp, fn) voxel counts for channel-first binary masks."""
    _check_shapes(pred, truth)
    p = pred.reshape(pred.shape[0], -1) > 0.5
    t = truth.reshape(truth.shape[0], -1) > 0.5
    tp = np.count_nonzero(p & t, axis=1).astype(np.int64)
    fp = np.count_nonzero(p & ~t, axis=1).astype(np.int64)
    fn = np.count_nonzero(~p & t, axis=1).astype(np.int64)
    return tp, fp, fn


def dice_metric(pred: np.ndarray, truth: np.ndarray):
    """Per-class Dice 2tp/(2tp+fp+fn); classes absent from both sides are NaN
    and excluded from the aggregate."""
    tp, fp, fn = confusion_counts(pred, truth)
    scores = np.full(len(tp), np.nan)
    for c in range(len(tp)):
        denom = 2 * tp[c] + fp[c] + fn[c]
        if denom > 0:
            scores[c] = 2.0 * tp[c] / denom
    defined = scores[~np.isnan(scores)]
    aggregate = float(defined.mean()) if defined.size else float("nan")
    return scores, aggregate


class DiceMetric:
    """Accumulates per-(item, class) Dice; aggregate is the mean over defined pairs."""

    def __init__(self):
        self._scores: list[float] = []

    def reset(self):
        self._scores = []

    def accumulate(self, pred: np.ndarray, truth: np.ndarray):
        scores, _ = dice_metric(pred, truth)
        self._scores.extend(s for s in scores if not math.isnan(s))

    def aggregate(self) -> float:
        if not self._scores:
            return float("nan")
        return float(np.mean(self._scores))


def dice_loss(pred: np.ndarray, truth: np.ndarray, smooth: float = 1e-5) -> float:
    """1 - mean over classes of (2*sum(p*g) + smooth) / (sum(p) + sum(g) + smooth)."""
    _check_shapes(pred, truth)
    p = pred.reshape(pred.shape[0], -1).astype(np.float64)
    g = truth.reshape(truth.shape[0], -1).astype(np.float64)
    inter = (p * g).sum(axis=1)
    ratio = (2.0 * inter + smooth) / (p.sum(axis=1) + g.sum(axis=1) + smooth)
    return float(1.0 - ratio.mean())


def tversky_loss(pred: np.ndarray, truth: np.ndarray, alpha: float = 0.5,
                 beta: float = 0.5, smooth: float = 1e-5) -> float:
    """Tversky index loss with false positives weighted by alpha and false
    negatives by beta; alpha = beta = 0.5 reduces exactly to dice_loss."""
    _check_shapes(pred, truth)
    p = pred.reshape(pred.shape[0], -1).astype(np.float64)
    g = truth.reshape(truth.shape[0], -1).astype(np.float64)
    tp = (p * g).sum(axis=1)
    fp = (p * (1.0 - g)).sum(axis=1)
    fn = ((1.0 - p) * g).sum(axis=1)
    ratio = (2.0 * tp + smooth) / (2.0 * (tp + alpha * fp + beta * fn) + smooth)
    return float(1.0 - ratio.mean())


def generalized_dice_loss(pred: np.ndarray, truth: np.ndarray, smooth: float = 1e-5) -> float:
    """Class-weighted Dice with w_c = 1 / (sum g_c)^2; absent classes weight 0."""
    _check_shapes(pred, truth)
    p = pred.reshape(pred.shape[0], -1).astype(np.float64)
    g = truth.reshape(truth.shape[0], -1).astype(np.float64)
    gsum = g.sum(axis=1)
    w = np.where(gsum > 0, 1.0 / np.maximum(gsum, 1.0) ** 2, 0.0)
    inter = (w * (p * g).sum(axis=1)).sum()
    union = (w * (p.sum(axis=1) + gsum)).sum()
    return float(1.0 - (2.0 * inter + smooth) / (union + smooth))


def focal_loss(pred: np.ndarray, truth: np.ndarray, gamma: float = 2.0,
               clamp: float = 1e-7) -> float:
    """Mean over voxels of -(1 - p_t)^gamma * log(p_t); gamma=0 is cross-entropy."""
    _check_shapes(pred, truth)
    p = pred.astype(np.float64)
    g = truth.astype(np.float64)
    pt = np.clip((p * g).sum(axis=0), clamp, 1.0 - clamp)
    return float(np.mean(-((1.0 - pt) ** gamma) * np.log(pt)))


def mse_loss(a: np.ndarray, b: np.ndarray) -> float:
    _check_shapes(a, b)
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.mean(diff * diff))


def bending_energy(field: np.ndarray) -> float:
    """Mean over interior voxels of the summed squared second derivatives of
    the displacement field (central differences, unit spacing); mixed terms
    appear twice via the full double sum over axis pairs. Zero for affine fields."""
    field = np.asarray(field, dtype=np.float64)
    rank = field.shape[0]
    if field.ndim - 1 != rank:
        raise ValueError(f"field shape {field.shape} is not (S, D1..DS)")
    dims = field.shape[1:]
    if any(d < 3 for d in dims):
        raise ValueError(f"dims {dims} too small for central differences (need >= 3)")
    interior = tuple(slice(1, -1) for _ in range(rank))

    def shift(u, ax, k):
        return np.roll(u, -k, axis=ax)[interior]

    total = np.zeros(tuple(d - 2 for d in dims))
    for comp in range(rank):
        u = field[comp]
        for i in range(rank):
            for j in range(rank):
                if i == j:
                    d2 = shift(u, i, 1) - 2.0 * u[interior] + shift(u, i, -1)
                else:
                    d2 = (np.roll(np.roll(u, -1, axis=i), -1, axis=j)[interior]
                          - np.roll(np.roll(u, -1, axis=i), 1, axis=j)[interior]
                          - np.roll(np.roll(u, 1, axis=i), -1, axis=j)[interior]
                          + np.roll(np.roll(u, 1, axis=i), 1, axis=j)[interior]) / 4.0
                total += d2 * d2
    return float(total.mean())


def occlusion_sensitivity(image: MetaVolume, predictor, class_index: int, box_size,
                          stride, fill=None) -> MetaVolume:
    """Occlude boxes on a stride grid; map cell value = occluded score - baseline.

    Negative values mark regions the predictor relied on. `fill` defaults to
    the per-channel mean of the image.
    """
    rank = image.rank
    dims = image.spatial_shape
    box = tuple(int(b) for b in np.broadcast_to(box_size, (rank,)))
    step = tuple(int(s) for s in np.broadcast_to(stride, (rank,)))
    if any(b > d for b, d in zip(box, dims)):
        raise ValueError(f"box_size {box} exceeds dims {dims}")
    if any(s < 1 for s in step):
        raise ValueError("stride must be >= 1")
    if fill is None:
        fill_vals = image.data.reshape(image.channels, -1).mean(axis=1)
    else:
        fill_vals = np.broadcast_to(np.asarray(fill, dtype=np.float32), (image.channels,))
    baseline = float(np.asarray(predictor(image))[class_index])
    out = np.zeros((1,) + dims, dtype=np.float32)
    grids = [range(0, d, s) for d, s in zip(dims, step)]
    for origin in itertools.product(*grids):
        occluded = image.data.copy()
        box_sl = tuple(slice(o, min(o + b, d)) for o, b, d in zip(origin, box, dims))
        for c in range(image.channels):
            occluded[(c,) + box_sl] = fill_vals[c]
        score = float(np.asarray(predictor(image.evolve(data=occluded)))[class_index])
        cell_sl = tuple(slice(o, min(o + s, d)) for o, s, d in zip(origin, step, dims))
        out[(0,) + cell_sl] = score - baseline
    return MetaVolume(out, image.affine.copy(), dict(image.meta), [])
