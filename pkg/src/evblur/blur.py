"""Motion-aware blur synthesis: forward-warp a sharp frame along per-slice flows
and average the warped frames with hole awareness.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image as PILImage

from .events import EventStream, EventValidationError, slice_events
from .flow import FlowField, FlowParams, estimate_flow

COVERAGE_FLOOR = 0.25
EPSILON = 1e-6


@dataclass(frozen=True)
class WarpedFrame:
    image: np.ndarray
    hole_mask: np.ndarray  # 1 where the pixel received enough mass, 0 in holes


@dataclass(frozen=True)
class BlurSample:
    blur: np.ndarray
    source_sharp: np.ndarray
    flows_used: int
    epsilon: float


def check_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] not in (1, 3)):
        raise EventValidationError(f"{name} must be HxW or HxWxC with C in (1, 3), got {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise EventValidationError(f"{name} values must lie in [0, 1]")
    return img


def splat_forward(values: np.ndarray, dx: np.ndarray, dy: np.ndarray, source_mask: np.ndarray | None = None):
    """Bilinearly push every (masked) source pixel to (x + dx, y + dy).

    Returns (accumulated values, accumulated weight). ``values`` may carry a
    trailing channel axis.
    """
    h, w = dx.shape
    vals = values.reshape(h * w, -1)
    ys, xs = np.mgrid[0:h, 0:w]
    tx = (xs + dx).ravel()
    ty = (ys + dy).ravel()
    keep = np.isfinite(tx) & np.isfinite(ty)
    if source_mask is not None:
        keep &= np.asarray(source_mask, dtype=bool).ravel()
    tx, ty, vals = tx[keep], ty[keep], vals[keep]
    x0 = np.floor(tx)
    y0 = np.floor(ty)
    fx, fy = tx - x0, ty - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    acc = np.zeros((h * w, vals.shape[1]))
    wsum = np.zeros(h * w)
    for ox, oy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + ox, y0 + oy
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h) & (wt > 0)
        idx = yi[ok] * w + xi[ok]
        wsum += np.bincount(idx, weights=wt[ok], minlength=h * w)
        for c in range(vals.shape[1]):
            acc[:, c] += np.bincount(idx, weights=wt[ok] * vals[ok, c], minlength=h * w)
    return acc.reshape(values.shape), wsum.reshape(h, w)


def forward_warp(sharp: np.ndarray, flow: FlowField, coverage_floor: float = COVERAGE_FLOOR) -> WarpedFrame:
    sharp = check_image(sharp, "sharp")
    if sharp.shape[:2] != flow.u.shape:
        raise EventValidationError(f"image {sharp.shape[:2]} and flow {flow.u.shape} differ in size")
    acc, wsum = splat_forward(sharp, flow.u, flow.v)
    covered = wsum >= coverage_floor
    denom = np.where(covered, wsum, 1.0)
    img = acc / (denom[..., None] if sharp.ndim == 3 else denom)
    img = np.where(covered[..., None] if sharp.ndim == 3 else covered, img, 0.0)
    return WarpedFrame(np.clip(img, 0.0, 1.0), covered.astype(np.uint8))


def synthesize_blur(sharp: np.ndarray, flows: Sequence[FlowField], epsilon: float = EPSILON,
                    hole_fill: str | None = None, coverage_floor: float = COVERAGE_FLOOR) -> BlurSample:
    """Hole-aware average of forward-warped frames: sum(W*delta) / (sum(delta) + eps)."""
    if len(flows) == 0:
        raise EventValidationError("synthesize_blur needs at least one flow")
    if hole_fill not in (None, "reference"):
        raise ValueError(f"unknown hole-fill mode {hole_fill!r}")
    sharp = check_image(sharp, "sharp")
    num = np.zeros_like(sharp)
    den = np.zeros(sharp.shape[:2])
    for flow in flows:
        wf = forward_warp(sharp, flow, coverage_floor)
        d = wf.hole_mask.astype(np.float64)
        num += wf.image * (d[..., None] if sharp.ndim == 3 else d)
        den += d
    blur = num / ((den + epsilon)[..., None] if sharp.ndim == 3 else den + epsilon)
    if hole_fill == "reference":
        empty = den == 0
        blur = np.where(empty[..., None] if sharp.ndim == 3 else empty, sharp, blur)
    return BlurSample(np.clip(blur, 0.0, 1.0), sharp, len(flows), float(epsilon))


def flows_from_events(stream: EventStream, t_ref: int, delta_tau: int, n_e: int,
                      params: FlowParams = FlowParams()) -> list[FlowField]:
    """Flow for each cumulative slice -n_e..n_e; index 0 is the identity."""
    flows = []
    for sl in slice_events(stream, t_ref, delta_tau, n_e):
        if sl.index == 0:
            flows.append(FlowField.zeros(*sl.resolution, valid=True))
        else:
            flows.append(estimate_flow(sl, params))
    return flows


def blur_from_events(sharp: np.ndarray, stream: EventStream, t_ref: int, delta_tau: int, n_e: int,
                     epsilon: float = EPSILON, hole_fill: str | None = None,
                     params: FlowParams = FlowParams()) -> BlurSample:
    if sharp.shape[:2] != (stream.height, stream.width):
        raise EventValidationError("sharp image and event sensor differ in size")
    return synthesize_blur(sharp, flows_from_events(stream, t_ref, delta_tau, n_e, params), epsilon, hole_fill)


def load_png(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("L") if im.mode not in ("L", "RGB") else im, dtype=np.float64)
    return arr / 255.0


def save_png(img: np.ndarray, path: str | Path) -> None:
    img = check_image(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    PILImage.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)
