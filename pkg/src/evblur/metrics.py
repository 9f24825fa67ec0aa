"""OKS-based keypoint evaluation: COCO-style greedy matching, 101-point AP and
recall averaged over OKS thresholds 0.50:0.05:0.95.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import K
from .poses import InstanceBox, Pose

KAPPA = 0.08
OKS_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EvalError(ValueError):
    pass


def oks(pred: Pose, gt: Pose, gt_box: InstanceBox, kappas=KAPPA) -> float:
    """Object keypoint similarity; NaN when the GT has no visible keypoints."""
    vis = gt.visibility
    if not vis.any():
        return math.nan
    kap = kappas if np.isscalar(kappas) else np.broadcast_to(np.asarray(kappas, dtype=np.float64), (K,))
    d2 = np.sum((pred.keypoints - gt.keypoints) ** 2, axis=1)
    s2 = gt_box.height * gt_box.width
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        e = np.exp(-d2 / (2.0 * s2 * kap ** 2))
    bad = np.isnan(e)
    if bad.any():
        e[bad] = 0.0
    return float(e[vis].mean())


def oks_table(preds: Sequence[Pose], gts: Sequence["GroundTruth"], kappas=KAPPA) -> np.ndarray:
    """(len(preds), len(gts)) OKS matrix, computed once and shared across thresholds."""
    out = np.empty((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = oks(p, g.pose, g.box, kappas)
    return out


@dataclass(frozen=True)
class GroundTruth:
    pose: Pose
    box: InstanceBox


@dataclass
class EvalResult:
    mAP: float
    mAR: float
    per_threshold: list[tuple[float, float, float]] = field(default_factory=list)
    n_gt: int = 0
    n_pred: int = 0

    def to_dict(self) -> dict:
        return {"mAP": self.mAP, "mAR": self.mAR, "n_gt": self.n_gt, "n_pred": self.n_pred,
                "per_threshold": [{"oks": t, "AP": a, "AR": r} for t, a, r in self.per_threshold]}

    def table(self) -> str:
        lines = [f"{'OKS':>6} {'AP':>8} {'AR':>8}"]
        for t, a, r in self.per_threshold:
            lines.append(f"{t:6.2f} {a:8.4f} {r:8.4f}")
        lines.append(f"{'mean':>6} {self.mAP:8.4f} {self.mAR:8.4f}")
        return "\n".join(lines)


def _frames(items, what: str) -> dict:
    if isinstance(items, Mapping):
        return dict(items)
    out = {}
    for fid, val in items:
        if fid in out:
            raise EvalError(f"duplicate frame id {fid!r} in {what}")
        out[fid] = val
    return out


def _as_gt(g) -> GroundTruth:
    if isinstance(g, GroundTruth):
        return g
    if isinstance(g, Pose):
        return GroundTruth(g, g.box())
    pose, box = g
    return GroundTruth(pose, box)


def average_precision(tp: np.ndarray, n_gt: int) -> tuple[float, float]:
    """(AP, recall) from score-ordered true-positive flags."""
    if n_gt == 0:
        return math.nan, math.nan
    if len(tp) == 0:
        return 0.0, 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # precision envelope, right to left
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean()), float(recall[-1])


def match_frame(preds: Sequence[Pose], gts: Sequence[GroundTruth], threshold: float,
                kappas=KAPPA, table: np.ndarray | None = None) -> list[bool]:
    """Greedy matching in descending score; returns TP flags in the order of ``preds``."""
    if table is None:
        table = oks_table(preds, gts, kappas)
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    tp = [False] * len(preds)
    for i in order:
        best, best_j = threshold, -1
        for j in range(len(gts)):
            if taken[j]:
                continue
            s = table[i, j]
            if not math.isnan(s) and s >= best and (best_j < 0 or s > best):
                best, best_j = s, j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def evaluate(predictions, ground_truth, kappas=KAPPA,
             thresholds: Iterable[float] = OKS_THRESHOLDS) -> EvalResult:
    """mAP/mAR over OKS thresholds.

    ``predictions`` and ``ground_truth`` map frame ids to pose lists (or are
    sequences of ``(frame_id, poses)`` pairs). GT entries are ``GroundTruth``,
    ``(pose, box)`` pairs or bare poses whose box is derived from keypoints.
    """
    pred = _frames(predictions, "predictions")
    gt = {fid: [_as_gt(g) for g in gs] for fid, gs in _frames(ground_truth, "ground truth").items()}
    unknown = set(pred) - set(gt)
    if unknown:
        raise EvalError(f"predictions for frames without ground truth: {sorted(map(str, unknown))[:5]}")
    gt = {fid: [g for g in gs if g.pose.visibility.any()] for fid, gs in gt.items()}
    n_gt = sum(len(g) for g in gt.values())
    fids = sorted(gt, key=str)
    n_pred = sum(len(pred.get(f, [])) for f in fids)
    frames = [(list(pred.get(f, [])), gt[f]) for f in fids]
    tables = [oks_table(ps, gs, kappas) for ps, gs in frames]
    rows = []
    for thr in thresholds:
        scores, flags = [], []
        for (ps, gs), tab in zip(frames, tables):
            tp = match_frame(ps, gs, float(thr), kappas, tab)
            scores.extend(p.score for p in ps)
            flags.extend(tp)
        order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
        ap, ar = average_precision(np.asarray(flags, dtype=bool)[order], n_gt)
        rows.append((float(thr), ap, ar))
    m_ap = float(np.mean([r[1] for r in rows])) if n_gt else math.nan
    m_ar = float(np.mean([r[2] for r in rows])) if n_gt else math.nan
    return EvalResult(m_ap, m_ar, rows, n_gt, n_pred)
