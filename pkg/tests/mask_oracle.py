"""Brute-force mask references, written pixel by pixel from the mask definitions."""
import numpy as np

from conftest import random_pose
from evblur import K
from evblur.poses import InstanceBox, Pose, PoseFieldSet
from evblur.pseudo import STUDENT, TEACHER, MaskParams, build_mutual_masks, build_single_masks

RES = (40, 32)


def in_near(px, py, p, side=8):
    cx, cy = int(np.floor(p[0] + 0.5)), int(np.floor(p[1] + 0.5))
    h = side // 2
    return cx - h <= px <= cx - h + side - 1 and cy - h <= py <= cy - h + side - 1


def ref_bilinear(img, x, y):
    h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return ((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
            + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def ref_confidence(fields, pose):
    total = 0.0
    for k in range(K):
        total += ref_bilinear(fields.keypoints[k], *pose.keypoints[k])
    return ref_bilinear(fields.center, *pose.center) * total / K


def ref_masks(poses, gates, boxes, width, height, side=8, background=0.1):
    hm = np.zeros((1 + K, height, width))
    off = np.zeros((K, height, width))
    for y in range(height):
        for x in range(width):
            for ch in range(1 + K):
                members = [i for i, p in enumerate(poses)
                           if in_near(x, y, p.center if ch == 0 else p.keypoints[ch - 1], side)]
                if not members:
                    hm[ch, y, x] = background
                else:
                    v = 1.0
                    for i in members:
                        v *= 1.0 if gates[i] else 0.0
                    hm[ch, y, x] = v
            diags = [np.sqrt(b.height ** 2 + b.width ** 2) for p, b in zip(poses, boxes) if in_near(x, y, p.center, side)]
            off[:, y, x] = 1.0 / min(diags) if diags else 0.0
    return hm, off


def random_instance(rng, n=None):
    n = rng.integers(0, 5) if n is None else n
    poses = [random_pose(rng, *RES, spread=5.0, margin=4.0) for _ in range(n)]
    boxes = [InstanceBox(rng.uniform(2, 30), rng.uniform(2, 30)) for _ in range(n)]
    return poses, boxes


def random_fields(rng):
    w, h = RES
    return PoseFieldSet(rng.random((h, w)), rng.random((K, h, w)), np.zeros((2 * K, h, w)))


def check_single_against_oracle(rng, th=0.1):
    poses, boxes = random_instance(rng)
    conf = rng.random(len(poses)) * 0.3
    got = build_single_masks(poses, conf, boxes, MaskParams(threshold=th), RES)
    hm, off = ref_masks(poses, conf >= th, boxes, *RES)
    return np.array_equal(got.heatmap, hm) and np.allclose(got.offset, off, atol=1e-9, rtol=0)


def check_mutual_against_oracle(rng, th=0.1):
    poses, boxes = random_instance(rng)
    poses = [Pose(p.center, p.keypoints, score=p.score, provenance=TEACHER if rng.random() < 0.5 else STUDENT)
             for p in poses]
    tf, sf = random_fields(rng), random_fields(rng)
    got = build_mutual_masks(poses, tf, sf, boxes, MaskParams(threshold=th), RES)
    gates = []
    for p in poses:
        own, other = (tf, sf) if p.provenance == TEACHER else (sf, tf)
        gates.append(min(ref_confidence(own, p), ref_confidence(other, p)) >= th)
    hm, off = ref_masks(poses, gates, boxes, *RES)
    return np.array_equal(got.heatmap, hm) and np.allclose(got.offset, off, atol=1e-9, rtol=0)
