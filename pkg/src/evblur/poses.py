"""Pose fields: encoding poses into center/keypoint heatmaps plus center offsets,
decoding them back, pose scoring and OKS-based non-maximum suppression.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import K
from .tensorio import load_tensor, save_tensor

OFFSET_RADIUS = 4.0
BOX_PAD = 4.0


@dataclass(frozen=True)
class Pose:
    center: np.ndarray  # (2,) x, y
    keypoints: np.ndarray  # (K, 2)
    visibility: np.ndarray = None  # (K,) bool
    score: float = 1.0
    provenance: str = ""

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(2)
        kp = np.asarray(self.keypoints, dtype=np.float64)
        if kp.shape != (K, 2):
            raise ValueError(f"pose needs {K} keypoints, got shape {kp.shape}")
        vis = np.ones(K, dtype=bool) if self.visibility is None else np.asarray(self.visibility, dtype=bool)
        if vis.shape != (K,):
            raise ValueError("visibility must have one flag per keypoint")
        if not self.score >= 0:
            raise ValueError(f"pose score must be non-negative, got {self.score}")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "score", float(self.score))

    @classmethod
    def from_keypoints(cls, keypoints, score: float = 1.0, **kw) -> "Pose":
        kp = np.asarray(keypoints, dtype=np.float64)
        return cls(kp.mean(axis=0), kp, score=score, **kw)

    def with_score(self, score: float) -> "Pose":
        return replace(self, score=float(score))

    def translated(self, dx: float, dy: float) -> "Pose":
        d = np.array([dx, dy], dtype=np.float64)
        return replace(self, center=self.center + d, keypoints=self.keypoints + d)

    def box(self, pad: float = BOX_PAD) -> "InstanceBox":
        return InstanceBox.from_keypoints(self.keypoints, pad)


@dataclass(frozen=True)
class InstanceBox:
    height: float
    width: float
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if not (self.height > 0 and self.width > 0):
            raise ValueError(f"instance box needs positive size, got {self.width}x{self.height}")

    @classmethod
    def from_keypoints(cls, keypoints: np.ndarray, pad: float = BOX_PAD) -> "InstanceBox":
        lo = keypoints.min(axis=0) - pad
        hi = keypoints.max(axis=0) + pad
        return cls(float(hi[1] - lo[1]), float(hi[0] - lo[0]), float(lo[0]), float(lo[1]))

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.height, self.width))

    @property
    def area(self) -> float:
        return self.height * self.width


@dataclass
class PoseFieldSet:
    center: np.ndarray  # (H, W)
    keypoints: np.ndarray  # (K, H, W)
    offsets: np.ndarray  # (2K, H, W): channel 2k is x, 2k+1 is y of p_c - p_k

    def __post_init__(self):
        self.center = np.clip(np.asarray(self.center, dtype=np.float64), 0.0, 1.0)
        self.keypoints = np.clip(np.asarray(self.keypoints, dtype=np.float64), 0.0, 1.0)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        h, w = self.center.shape
        if self.keypoints.shape != (K, h, w) or self.offsets.shape != (2 * K, h, w):
            raise ValueError("pose field channels disagree in shape")

    @property
    def resolution(self) -> tuple[int, int]:
        return self.center.shape[1], self.center.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> "PoseFieldSet":
        return cls(np.zeros((height, width)), np.zeros((K, height, width)), np.zeros((2 * K, height, width)))

    def heatmaps(self) -> np.ndarray:
        """Center then keypoint heatmaps, (1+K, H, W)."""
        return np.concatenate([self.center[None], self.keypoints])

    def to_tensor(self) -> np.ndarray:
        return np.concatenate([self.center[None], self.keypoints, self.offsets])

    @classmethod
    def from_tensor(cls, t: np.ndarray) -> "PoseFieldSet":
        t = np.asarray(t, dtype=np.float64)
        if t.ndim != 3 or t.shape[0] != 1 + 3 * K:
            raise ValueError(f"pose field tensor must be [{1 + 3 * K}, H, W], got {t.shape}")
        return cls(t[0], t[1:1 + K], t[1 + K:])

    def save(self, path) -> None:
        save_tensor(path, self.to_tensor())

    @classmethod
    def load(cls, path) -> "PoseFieldSet":
        return cls.from_tensor(load_tensor(path))


@dataclass(frozen=True)
class DecodeParams:
    max_centers: int = 30
    center_threshold: float = 0.03
    nms_oks_threshold: float = 0.5
    local_max_window: int = 3

    def __post_init__(self):
        if not 0 < self.center_threshold < 1:
            raise ValueError("center_threshold must lie in (0, 1)")
        if self.local_max_window < 1 or self.local_max_window % 2 == 0:
            raise ValueError("local_max_window must be a positive odd integer")
        if self.max_centers < 1:
            raise ValueError("max_centers must be positive")


# ---------------------------------------------------------------------------
# encoding


def _gaussian(width: int, height: int, p: np.ndarray, sigma: float) -> np.ndarray:
    xs = np.arange(width)
    ys = np.arange(height)
    gx = np.exp(-((xs - p[0]) ** 2) / (2 * sigma * sigma))
    gy = np.exp(-((ys - p[1]) ** 2) / (2 * sigma * sigma))
    return gy[:, None] * gx[None, :]


def encode_targets(poses: list[Pose], resolution: tuple[int, int], sigma: float = 2.0,
                   offset_radius: float = OFFSET_RADIUS) -> PoseFieldSet:
    """Max-combined Gaussian heatmaps and center-relative offsets.

    Offsets are written in a disk around each person's center, where decoding
    reads them; a pixel claimed by several people keeps the nearest center.
    """
    width, height = resolution
    out = PoseFieldSet.zeros(width, height)
    ys, xs = np.mgrid[0:height, 0:width]
    best = np.full((height, width), np.inf)
    lim = np.array([width - 1, height - 1], dtype=np.float64)
    for pose in poses:
        pts = np.vstack([pose.center[None], pose.keypoints])
        if np.any(pts < 0) or np.any(pts > lim):
            warnings.warn("pose extends outside the frame; clipped", RuntimeWarning, stacklevel=2)
        c = np.clip(pose.center, 0, lim)
        kp = np.clip(pose.keypoints, 0, lim)
        out.center = np.maximum(out.center, _gaussian(width, height, c, sigma))
        for k in range(K):
            if pose.visibility[k]:
                out.keypoints[k] = np.maximum(out.keypoints[k], _gaussian(width, height, kp[k], sigma))
        d2 = (xs - c[0]) ** 2 + (ys - c[1]) ** 2
        claim = (d2 <= offset_radius ** 2) & (d2 < best)
        best = np.where(claim, d2, best)
        disp = c[None, :] - kp
        for k in range(K):
            out.offsets[2 * k][claim] = disp[k, 0]
            out.offsets[2 * k + 1][claim] = disp[k, 1]
    return out


def offset_support(poses: list[Pose], resolution: tuple[int, int], offset_radius: float = OFFSET_RADIUS) -> np.ndarray:
    """Boolean (H, W) map of the pixels where ``encode_targets`` writes offsets."""
    width, height = resolution
    ys, xs = np.mgrid[0:height, 0:width]
    lim = np.array([width - 1, height - 1], dtype=np.float64)
    out = np.zeros((height, width), dtype=bool)
    for pose in poses:
        c = np.clip(pose.center, 0, lim)
        out |= (xs - c[0]) ** 2 + (ys - c[1]) ** 2 <= offset_radius ** 2
    return out


# ---------------------------------------------------------------------------
# decoding


def sample_bilinear(img: np.ndarray, x: float, y: float) -> float:
    """Bilinear sample with edge clamping; (x, y) in pixel coordinates."""
    h, w = img.shape
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return float((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                 + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def _local_maxima(hm: np.ndarray, window: int) -> np.ndarray:
    from scipy.ndimage import maximum_filter

    mx = maximum_filter(hm, size=window, mode="constant", cval=-np.inf)
    return (hm >= mx) & (hm > 0)


def _subpixel(hm: np.ndarray, x: int, y: int) -> np.ndarray:
    """Parabolic peak refinement, independently per axis."""
    h, w = hm.shape
    out = np.array([x, y], dtype=np.float64)
    for axis, (lo, mid, hi) in enumerate((
        (hm[y, x - 1] if x > 0 else None, hm[y, x], hm[y, x + 1] if x < w - 1 else None),
        (hm[y - 1, x] if y > 0 else None, hm[y, x], hm[y + 1, x] if y < h - 1 else None),
    )):
        if lo is None or hi is None:
            continue
        den = lo - 2 * mid + hi
        if den < 0:
            out[axis] += float(np.clip(0.5 * (lo - hi) / den, -0.5, 0.5))
    return out


def score_pose(fields: PoseFieldSet, pose: Pose) -> float:
    """Mean keypoint heat sampled at the pose's keypoints."""
    return float(np.mean([sample_bilinear(fields.keypoints[k], *pose.keypoints[k]) for k in range(K)]))


def decode_poses(fields: PoseFieldSet, params: DecodeParams = DecodeParams()) -> list[Pose]:
    hm = fields.center
    peaks = np.argwhere(_local_maxima(hm, params.local_max_window))
    if len(peaks) == 0:
        return []
    heat = hm[peaks[:, 0], peaks[:, 1]]
    # heat descending; ties broken by raster order so the result is deterministic
    order = np.lexsort((peaks[:, 1], peaks[:, 0], -heat))[: params.max_centers]
    poses = []
    for i in order:
        if heat[i] < params.center_threshold:
            continue
        y, x = int(peaks[i, 0]), int(peaks[i, 1])
        c = _subpixel(hm, x, y)
        off = fields.offsets[:, y, x].reshape(K, 2)
        pose = Pose(c, c[None, :] - off)
        poses.append(pose.with_score(score_pose(fields, pose)))
    return poses


# ---------------------------------------------------------------------------
# suppression


def pose_nms(poses: list[Pose], oks_threshold: float = 0.5) -> list[Pose]:
    """Greedy suppression in descending score order using OKS against kept poses."""
    from .metrics import oks

    order = sorted(range(len(poses)), key=lambda i: (-poses[i].score, i))
    kept: list[Pose] = []
    boxes: list[InstanceBox] = []
    for i in order:
        p = poses[i]
        if all(oks(p, q, b) <= oks_threshold for q, b in zip(kept, boxes)):
            kept.append(p)
            boxes.append(p.box())
    return kept


# ---------------------------------------------------------------------------
# JSON


def poses_to_json(poses: list[Pose]) -> dict:
    people = []
    for p in poses:
        b = p.box()
        entry = {
            "center": [float(v) for v in p.center],
            "keypoints": [[float(x), float(y), int(v)] for (x, y), v in zip(p.keypoints, p.visibility)],
            "score": p.score,
            "box": [b.x0, b.y0, b.width, b.height],
        }
        if p.provenance:
            entry["provenance"] = p.provenance
        people.append(entry)
    return {"people": people}


def poses_from_json(doc: dict) -> list[Pose]:
    out = []
    for entry in doc.get("people", []):
        kp = np.asarray(entry["keypoints"], dtype=np.float64).reshape(-1, 3)
        out.append(Pose(entry["center"], kp[:, :2], kp[:, 2] > 0, entry.get("score", 1.0),
                        entry.get("provenance", "")))
    return out


def save_poses(poses: list[Pose], path) -> None:
    Path(path).write_text(json.dumps(poses_to_json(poses), indent=1))


def load_poses(path) -> list[Pose]:
    return poses_from_json(json.loads(Path(path).read_text()))
