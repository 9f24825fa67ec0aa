"""Standard geometric augmentation applied jointly to an image and its pose annotations."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .poses import Pose, PoseFieldSet
from .sim import FLIP_PAIRS


def _swap_index() -> np.ndarray:
    from . import K

    idx = np.arange(K)
    for a, b in FLIP_PAIRS:
        idx[a], idx[b] = b, a
    return idx


@dataclass(frozen=True)
class AugmentParams:
    max_rotation: float = 30.0  # degrees
    flip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.75, 1.5)
    max_shift: float = 40.0  # pixels per axis

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError(f"scale_range must satisfy 0 < lo <= hi, got {self.scale_range}")
        if self.max_rotation < 0 or self.max_shift < 0 or not 0 <= self.flip_prob <= 1:
            raise ValueError("rotation/shift must be non-negative and flip_prob in [0, 1]")

    def sample(self, rng: np.random.Generator) -> "AffineAugment":
        return AffineAugment(
            angle=float(rng.uniform(-self.max_rotation, self.max_rotation)),
            flip=bool(rng.random() < self.flip_prob),
            scale=float(rng.uniform(*self.scale_range)),
            shift=(float(rng.uniform(-self.max_shift, self.max_shift)),
                   float(rng.uniform(-self.max_shift, self.max_shift))),
        )


@dataclass(frozen=True)
class AffineAugment:
    """Flip about the vertical mid-line, then rotate and scale about the image center, then shift."""

    angle: float = 0.0
    flip: bool = False
    scale: float = 1.0
    shift: tuple[float, float] = (0.0, 0.0)

    def linear(self) -> np.ndarray:
        a = np.deg2rad(self.angle)
        rot = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
        flip = np.diag([-1.0 if self.flip else 1.0, 1.0])
        return self.scale * rot @ flip

    def apply_points(self, pts: np.ndarray, size: tuple[int, int]) -> np.ndarray:
        """Map (..., 2) x/y points on a width x height image."""
        c = (np.array(size, dtype=np.float64) - 1) / 2
        return (np.asarray(pts, dtype=np.float64) - c) @ self.linear().T + c + np.asarray(self.shift)

    def warp(self, img: np.ndarray, order: int = 1) -> np.ndarray:
        """Resample a (H, W) or (C, H, W) array through the transform; outside is 0."""
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 3:
            return np.stack([self.warp(ch, order) for ch in img])
        h, w = img.shape
        c = np.array([(w - 1) / 2, (h - 1) / 2])
        inv = np.linalg.inv(self.linear())
        # source = inv @ (dest - c - shift) + c, rewritten in (row, col) order
        m = inv[::-1, ::-1]
        off_xy = c - inv @ (c + np.asarray(self.shift))
        return ndimage.affine_transform(img, m, offset=off_xy[::-1], order=order, mode="constant", cval=0.0)

    def is_identity(self) -> bool:
        return self.angle == 0 and not self.flip and self.scale == 1 and tuple(self.shift) == (0.0, 0.0)


def _transform_pose(pose: Pose, t: AffineAugment, size: tuple[int, int]) -> Pose:
    kp = t.apply_points(pose.keypoints, size)
    vis = pose.visibility.copy()
    if t.flip:
        idx = _swap_index()
        kp, vis = kp[idx], vis[idx]
    w, h = size
    inside = (kp[:, 0] >= 0) & (kp[:, 0] <= w - 1) & (kp[:, 1] >= 0) & (kp[:, 1] <= h - 1)
    return replace(pose, center=t.apply_points(pose.center, size), keypoints=kp, visibility=vis & inside)


def _transform_fields(fields: PoseFieldSet, t: AffineAugment) -> PoseFieldSet:
    from . import K

    center = t.warp(fields.center)
    heat = t.warp(fields.keypoints)
    # offsets are displacement vectors: resample with nearest neighbour, then map the vectors
    off = t.warp(fields.offsets, order=0).reshape(K, 2, *fields.center.shape)
    off = np.einsum("ij,kjhw->kihw", t.linear(), off)
    if t.flip:
        idx = _swap_index()
        heat, off = heat[idx], off[idx]
    return PoseFieldSet(center, heat, off.reshape(2 * K, *fields.center.shape))


def apply_augment(image: np.ndarray, target, t: AffineAugment):
    """Apply a fixed transform to an image and a PoseFieldSet or list of poses."""
    image = np.asarray(image, dtype=np.float64)
    if t.is_identity():
        return image.copy(), target
    h, w = image.shape[-2:]
    out_img = np.clip(t.warp(image), 0.0, 1.0)
    if isinstance(target, PoseFieldSet):
        return out_img, _transform_fields(target, t)
    return out_img, [_transform_pose(p, t, (w, h)) for p in target]


def geometric_augment(image: np.ndarray, target, params: AugmentParams, rng: np.random.Generator):
    """Random rotation, flip, scale and shift applied identically to image and poses."""
    return apply_augment(image, target, params.sample(rng))
