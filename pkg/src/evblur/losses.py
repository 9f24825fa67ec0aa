"""Masked heatmap (squared error) and offset (smooth L1) losses with analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .poses import PoseFieldSet
from .pseudo import MaskSet

LAMBDA_G = 0.03


class LossShapeError(ValueError):
    pass


def _check(pred, target, mask):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if pred.shape != target.shape:
        raise LossShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    try:
        mask = np.broadcast_to(mask, pred.shape)
    except ValueError:
        raise LossShapeError(f"mask {mask.shape} does not broadcast to {pred.shape}") from None
    return pred, target, mask


def masked_heatmap_loss(pred, target, mask=1.0) -> tuple[float, np.ndarray]:
    """mean(mask * (pred - target)^2) and its gradient with respect to ``pred``."""
    pred, target, mask = _check(pred, target, mask)
    d = pred - target
    n = d.size
    return float(np.sum(mask * d * d) / n), 2.0 * mask * d / n


def smooth_l1(d: np.ndarray, beta: float = 1.0) -> np.ndarray:
    a = np.abs(d)
    return np.where(a < beta, 0.5 * d * d / beta, a - 0.5 * beta)


def masked_offset_loss(pred, target, mask=1.0, beta: float = 1.0) -> tuple[float, np.ndarray]:
    """mean(mask * smoothL1(pred - target)) and its gradient with respect to ``pred``."""
    pred, target, mask = _check(pred, target, mask)
    d = pred - target
    n = d.size
    grad = np.where(np.abs(d) < beta, d / beta, np.sign(d))
    return float(np.sum(mask * smooth_l1(d, beta)) / n), mask * grad / n


@dataclass
class LossReport:
    heatmap_loss: float
    offset_loss: float
    total: float
    lambda_g: float
    grad_heatmaps: np.ndarray | None = None  # (1+K, H, W)
    grad_offsets: np.ndarray | None = None  # (2K, H, W)


def supervised_loss(pred: PoseFieldSet, target: PoseFieldSet, masks: MaskSet | None = None,
                    lambda_g: float = LAMBDA_G) -> LossReport:
    """Heatmap loss plus lambda_g times offset loss; unit masks when ``masks`` is None."""
    hm_mask = 1.0 if masks is None else masks.heatmap
    off_mask = 1.0 if masks is None else masks.offset_full()
    lh, gh = masked_heatmap_loss(pred.heatmaps(), target.heatmaps(), hm_mask)
    lo, go = masked_offset_loss(pred.offsets, target.offsets, off_mask)
    return LossReport(lh, lo, lh + lambda_g * lo, lambda_g, gh, lambda_g * go)
