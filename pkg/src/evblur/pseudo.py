"""Pseudo-label generation with confidence-gated loss masks, for a single
network or for a teacher/student pair (mutual masking).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import warnings

import numpy as np

from . import K
from .poses import (DecodeParams, InstanceBox, Pose, PoseFieldSet, decode_poses, encode_targets,
                    pose_nms, sample_bilinear)
from .tensorio import load_tensors, save_tensors

TEACHER = "teacher"
STUDENT = "student"


@dataclass(frozen=True)
class MaskParams:
    threshold: float = 0.1
    near_side: int = 8
    background_value: float = 0.1
    gate_offsets: bool = False  # also zero the offset mask around low-confidence centers

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("mask threshold must lie in (0, 1)")
        if self.near_side < 1:
            raise ValueError("near_side must be positive")


@dataclass
class MaskSet:
    heatmap: np.ndarray  # (1+K, H, W), channel 0 is the center
    offset: np.ndarray  # (K, H, W)

    @classmethod
    def ones(cls, width: int, height: int) -> "MaskSet":
        return cls(np.ones((1 + K, height, width)), np.ones((K, height, width)))

    def offset_full(self) -> np.ndarray:
        """Offset mask broadcast to the 2K offset channels."""
        return np.repeat(self.offset, 2, axis=0)

    def save(self, path) -> None:
        save_tensors(path, [self.heatmap, self.offset])

    @classmethod
    def load(cls, path) -> "MaskSet":
        hm, off = load_tensors(path)
        return cls(hm.astype(np.float64), off.astype(np.float64))


def confidence(fields: PoseFieldSet, pose: Pose) -> float:
    """Center heat times mean keypoint heat, both sampled bilinearly."""
    hc = sample_bilinear(fields.center, *pose.center)
    hk = sum(sample_bilinear(fields.keypoints[k], *pose.keypoints[k]) for k in range(K)) / K
    return float(hc * hk)


def near_bounds(p: np.ndarray, side: int) -> tuple[int, int, int, int]:
    """Inclusive (x0, x1, y0, y1) of the side x side square with corner round(p) - side//2."""
    cx, cy = int(np.floor(p[0] + 0.5)), int(np.floor(p[1] + 0.5))
    h = side // 2
    return cx - h, cx - h + side - 1, cy - h, cy - h + side - 1


def _near_mask(p: np.ndarray, side: int, width: int, height: int) -> np.ndarray:
    x0, x1, y0, y1 = near_bounds(p, side)
    m = np.zeros((height, width), dtype=bool)
    m[max(y0, 0):max(min(y1 + 1, height), 0), max(x0, 0):max(min(x1 + 1, width), 0)] = True
    return m


def pixel_pose_index(poses: Sequence[Pose], resolution: tuple[int, int], near_side: int = 8) -> np.ndarray:
    """Membership array of shape (1+K, n_poses, H, W): channel 0 uses centers, 1+k keypoint k."""
    width, height = resolution
    out = np.zeros((1 + K, len(poses), height, width), dtype=bool)
    for i, pose in enumerate(poses):
        out[0, i] = _near_mask(pose.center, near_side, width, height)
        for k in range(K):
            out[1 + k, i] = _near_mask(pose.keypoints[k], near_side, width, height)
    return out


def _heatmap_mask(index: np.ndarray, gates: np.ndarray, background: float) -> np.ndarray:
    """Product of per-pose gates over covering poses; background where nothing covers."""
    if index.shape[1] == 0:
        return np.full((index.shape[0],) + index.shape[2:], background)
    g = gates.astype(np.float64)[None, :, None, None]
    prod = np.prod(np.where(index, g, 1.0), axis=1)
    return np.where(index.any(axis=1), prod, background)


def _offset_mask(poses: Sequence[Pose], boxes: Sequence[InstanceBox], side: int,
                 resolution: tuple[int, int], gates: np.ndarray | None = None) -> np.ndarray:
    width, height = resolution
    diag = np.full((height, width), np.inf)
    for i, (pose, box) in enumerate(zip(poses, boxes)):
        if gates is not None and not gates[i]:
            continue
        m = _near_mask(pose.center, side, width, height)
        diag = np.where(m, np.minimum(diag, box.diagonal), diag)
    inv = np.where(np.isfinite(diag), 1.0 / diag, 0.0)
    return np.repeat(inv[None], K, axis=0)


def _check_boxes(poses, boxes):
    if boxes is None or len(boxes) != len(poses) or any(b is None for b in boxes):
        raise ValueError("every pose needs an instance box")


def build_single_masks(poses: Sequence[Pose], confidences: Sequence[float], boxes: Sequence[InstanceBox],
                       params: MaskParams, resolution: tuple[int, int]) -> MaskSet:
    _check_boxes(poses, boxes)
    if len(confidences) != len(poses):
        raise ValueError("confidences must align with poses")
    gates = np.asarray(confidences, dtype=np.float64) >= params.threshold
    index = pixel_pose_index(poses, resolution, params.near_side)
    hm = _heatmap_mask(index, gates, params.background_value)
    off = _offset_mask(poses, boxes, params.near_side, resolution, gates if params.gate_offsets else None)
    return MaskSet(hm, off)


def merge_poses(teacher_poses: Sequence[Pose], student_poses: Sequence[Pose], oks_threshold: float = 0.5) -> list[Pose]:
    tagged = [replace(p, provenance=TEACHER) for p in teacher_poses]
    tagged += [replace(p, provenance=STUDENT) for p in student_poses]
    return pose_nms(tagged, oks_threshold)


def mutual_confidences(poses: Sequence[Pose], teacher_fields: PoseFieldSet,
                       student_fields: PoseFieldSet) -> tuple[np.ndarray, np.ndarray]:
    """(C, C') per pose: C on the producing network's fields, C' on the partner's."""
    c, c2 = [], []
    for p in poses:
        if p.provenance not in (TEACHER, STUDENT):
            raise ValueError("mutual masking needs poses tagged with their producing network")
        own, other = (teacher_fields, student_fields) if p.provenance == TEACHER else (student_fields, teacher_fields)
        c.append(confidence(own, p))
        c2.append(confidence(other, p))
    return np.asarray(c), np.asarray(c2)


def build_mutual_masks(poses: Sequence[Pose], teacher_fields: PoseFieldSet, student_fields: PoseFieldSet,
                       boxes: Sequence[InstanceBox], params: MaskParams,
                       resolution: tuple[int, int]) -> MaskSet:
    _check_boxes(poses, boxes)
    if teacher_fields.resolution != student_fields.resolution:
        raise ValueError("teacher and student fields differ in resolution")
    c, c2 = mutual_confidences(poses, teacher_fields, student_fields)
    gates = np.minimum(c, c2) >= params.threshold
    index = pixel_pose_index(poses, resolution, params.near_side)
    hm = _heatmap_mask(index, gates, params.background_value)
    off = _offset_mask(poses, boxes, params.near_side, resolution, gates if params.gate_offsets else None)
    return MaskSet(hm, off)


def default_boxes(poses: Sequence[Pose]) -> list[InstanceBox]:
    return [p.box() for p in poses]


def _encode_quiet(poses, res, sigma):
    # decoded keypoints may fall outside the frame; clipping them is expected here
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return encode_targets(poses, res, sigma)


@dataclass
class PseudoLabels:
    targets: PoseFieldSet
    masks: MaskSet
    poses: list[Pose]
    confidences: np.ndarray


def generate_pseudo_labels(fields: PoseFieldSet, decode: DecodeParams = DecodeParams(),
                           mask_params: MaskParams = MaskParams(),
                           box_estimator: Callable[[Sequence[Pose]], list[InstanceBox]] = default_boxes,
                           sigma: float = 2.0) -> PseudoLabels:
    res = fields.resolution
    poses = pose_nms(decode_poses(fields, decode), decode.nms_oks_threshold)
    conf = np.array([confidence(fields, p) for p in poses])
    masks = build_single_masks(poses, conf, box_estimator(poses), mask_params, res)
    return PseudoLabels(_encode_quiet(poses, res, sigma), masks, poses, conf)


def generate_mutual_pseudo_labels(teacher_fields: PoseFieldSet, student_fields: PoseFieldSet,
                                  decode: DecodeParams = DecodeParams(),
                                  mask_params: MaskParams = MaskParams(),
                                  box_estimator: Callable[[Sequence[Pose]], list[InstanceBox]] = default_boxes,
                                  sigma: float = 2.0) -> PseudoLabels:
    res = teacher_fields.resolution
    t_poses = pose_nms(decode_poses(teacher_fields, decode), decode.nms_oks_threshold)
    s_poses = pose_nms(decode_poses(student_fields, decode), decode.nms_oks_threshold)
    poses = merge_poses(t_poses, s_poses, decode.nms_oks_threshold)
    c, c2 = mutual_confidences(poses, teacher_fields, student_fields)
    masks = build_mutual_masks(poses, teacher_fields, student_fields, box_estimator(poses), mask_params, res)
    return PseudoLabels(_encode_quiet(poses, res, sigma), masks, poses, np.minimum(c, c2))
