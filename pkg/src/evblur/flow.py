"""Block-wise optical flow from event slices by contrast maximization.

For each block, events are warped back to the slice start with a candidate
velocity and the variance of the resulting image of warped events is scored.
A coarse integer grid search is followed by golden-section refinement along
each axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .events import EventCountImage, EventSlice, EventValidationError

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_REFINE_ROUNDS = 30
_REFINE_SPAN = 2.0
_FINE_SIGMA = 0.75  # pixels; tuned on textured translation scenes
_COARSE_SMOOTH = 0.0  # plain bilinear variance for the integer grid


@dataclass(frozen=True)
class FlowParams:
    block_size: int = 16
    search_radius: int = 12
    refine_steps: int = 20
    min_events: int = 8

    def __post_init__(self):
        if self.block_size < 4 or self.search_radius < 1 or self.min_events < 1 or self.refine_steps < 0:
            raise ValueError(f"invalid flow parameters {self}")


@dataclass(frozen=True)
class FlowField:
    u: np.ndarray
    v: np.ndarray
    valid: np.ndarray

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int, valid: bool = False) -> "FlowField":
        z = np.zeros((height, width))
        return cls(z, z.copy(), np.full((height, width), valid))

    @classmethod
    def uniform(cls, width: int, height: int, u: float, v: float) -> "FlowField":
        return cls(np.full((height, width), float(u)), np.full((height, width), float(v)),
                   np.ones((height, width), dtype=bool))

    def negated(self) -> "FlowField":
        return FlowField(-self.u + 0.0, -self.v + 0.0, self.valid.copy())

    def to_tensor(self) -> np.ndarray:
        return np.stack([self.u, self.v, self.valid.astype(np.float64)]).astype(np.float32)

    @classmethod
    def from_tensor(cls, tensor: np.ndarray) -> "FlowField":
        if tensor.ndim != 3 or tensor.shape[0] != 3:
            raise ValueError(f"flow tensor must be [3, H, W], got {tensor.shape}")
        valid = tensor[2] > 0.5
        return cls(np.where(valid, tensor[0], 0.0).astype(np.float64),
                   np.where(valid, tensor[1], 0.0).astype(np.float64), valid)


def _alpha(sl: EventSlice) -> np.ndarray:
    if sl.duration <= 0:
        raise EventValidationError("cannot warp a zero-duration slice")
    return (sl.events.t - sl.t_a).astype(np.float64) / float(sl.duration)


def _splat(xs, ys, weights, width, height, n_layers=1, layer=None) -> np.ndarray:
    """Bilinear splat of point masses; returns (n_layers, height, width)."""
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    if layer is None:
        layer = np.zeros(np.shape(xs), dtype=np.int64)
    out = np.zeros(n_layers * height * width)
    for dx, dy, w in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                      (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
        idx = (layer * height + yi) * width + xi
        out += np.bincount(idx[ok], weights=(w * weights)[ok], minlength=out.size)
    return out.reshape(n_layers, height, width)


def _splat_gaussian(xs, ys, sigma, width, height, n_layers=1, layer=None) -> np.ndarray:
    """Each point deposits a sampled Gaussian; nearly free of pixel-grid aliasing for sigma >= 1."""
    rad = int(math.ceil(3 * sigma))
    xc = np.floor(xs).astype(np.int64)
    yc = np.floor(ys).astype(np.int64)
    offs = np.arange(-rad, rad + 2)
    gx = np.exp(-0.5 * ((xc[:, None] + offs - xs[:, None]) / sigma) ** 2)
    gy = np.exp(-0.5 * ((yc[:, None] + offs - ys[:, None]) / sigma) ** 2)
    norm = 1.0 / (2 * math.pi * sigma * sigma)
    if layer is None:
        layer = np.zeros(len(xs), dtype=np.int64)
    xi = xc[:, None] + offs
    yi = yc[:, None] + offs
    okx = (xi >= 0) & (xi < width)
    oky = (yi >= 0) & (yi < height)
    idx = (layer[:, None, None] * height + yi[:, :, None]) * width + xi[:, None, :]
    w = gy[:, :, None] * gx[:, None, :] * norm
    ok = oky[:, :, None] & okx[:, None, :]
    out = np.bincount(idx[ok], weights=w[ok], minlength=n_layers * height * width)
    return out.reshape(n_layers, height, width)


def warp_event_image(sl: EventSlice, velocity: tuple[float, float], mode: str = "signed") -> EventCountImage:
    """Image of warped events: each event moves to (x - vx*a, y - vy*a), a in [0, 1)."""
    if len(sl) == 0:
        raise EventValidationError("cannot warp an empty slice")
    alpha = _alpha(sl)
    ev = sl.events
    xs = ev.x - velocity[0] * alpha
    ys = ev.y - velocity[1] * alpha
    if mode == "signed":
        img = _splat(xs, ys, ev.p.astype(np.float64), ev.width, ev.height)[0]
    elif mode == "split":
        img = _splat(xs, ys, np.ones(len(ev)), ev.width, ev.height, 2, (ev.p < 0).astype(np.int64))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return EventCountImage(ev.width, ev.height, img, mode)


def contrast(image: EventCountImage | np.ndarray) -> float:
    counts = image.counts if isinstance(image, EventCountImage) else np.asarray(image)
    if counts.size == 0:
        return 0.0
    return float(np.var(counts))


class _BlockObjective:
    """Contrast of one block's warped events on a fixed local canvas, vectorized over velocities.

    ``kernel="bilinear"`` splats bilinearly and then blurs by ``smooth`` pixels; it is
    cheap but mildly favors warps that keep events on the pixel grid. ``"gaussian"``
    deposits an exact sampled Gaussian per event, which removes that preference.
    """

    def __init__(self, xs, ys, pol, alpha, origin, block_size, margin, smooth=1.0, kernel="bilinear"):
        self.smooth = smooth
        self.kernel = kernel
        self.xs = xs - origin[0] + margin
        self.ys = ys - origin[1] + margin
        self.layer = (pol < 0).astype(np.int64)
        self.alpha = alpha
        self.side = block_size + 2 * margin

    def __call__(self, velocities: np.ndarray) -> np.ndarray:
        velocities = np.atleast_2d(velocities)
        m = len(velocities)
        s = self.side
        wx = self.xs[None, :] - velocities[:, 0:1] * self.alpha[None, :]
        wy = self.ys[None, :] - velocities[:, 1:2] * self.alpha[None, :]
        layer = (self.layer[None, :] + 2 * np.arange(m)[:, None]).ravel()
        if self.kernel == "gaussian":
            img = _splat_gaussian(wx.ravel(), wy.ravel(), self.smooth, s, s, 2 * m, layer)
        else:
            img = _splat(wx.ravel(), wy.ravel(), np.ones(wx.size), s, s, 2 * m, layer)
            if self.smooth > 0:
                img = gaussian_filter(img, (0, self.smooth, self.smooth), mode="constant")
        return img.reshape(m, -1).var(axis=1)


def _golden_max(f, lo: float, hi: float, steps: int) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(steps):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def estimate_block_velocity(coarse: _BlockObjective, fine: _BlockObjective, params: FlowParams) -> np.ndarray:
    r = params.search_radius
    grid = np.arange(-r, r + 1, dtype=np.float64)
    cand = np.stack(np.meshgrid(grid, grid, indexing="xy"), axis=-1).reshape(-1, 2)
    scores = np.concatenate([coarse(c) for c in np.array_split(cand, max(1, len(cand) // 64))])
    # ties resolved toward the smallest speed
    best_score = scores.max()
    ties = np.flatnonzero(scores >= best_score - 1e-12 * max(1.0, abs(best_score)))
    best = cand[ties[np.argmin(np.hypot(cand[ties, 0], cand[ties, 1]))]].copy()
    if params.refine_steps == 0:
        return best
    # the bilinear coarse score slightly favors zero components, so search wider than one cell
    lo, hi = best - _REFINE_SPAN, best + _REFINE_SPAN
    best_val = float(fine(best)[0])
    for _ in range(_REFINE_ROUNDS):
        start = best.copy()
        for axis in (0, 1):
            def f(val, axis=axis):
                trial = best.copy()
                trial[axis] = val
                return float(fine(trial)[0])
            refined = _golden_max(f, lo[axis], hi[axis], params.refine_steps)
            val = f(refined)
            if val >= best_val:
                best[axis], best_val = refined, val
        if np.max(np.abs(best - start)) < 1e-3:
            break
    return best


def _block_objectives(xs, ys, pol, alpha, origin, params: FlowParams):
    margin = params.search_radius + 2
    args = (xs, ys, pol, alpha, origin, params.block_size, margin)
    return _BlockObjective(*args, smooth=_COARSE_SMOOTH), _BlockObjective(*args, smooth=_FINE_SIGMA, kernel="gaussian")


def estimate_flow(sl: EventSlice, params: FlowParams = FlowParams()) -> FlowField:
    """Block-constant flow of a slice, expressed as displacement from the reference time."""
    width, height = sl.resolution
    flow = FlowField.zeros(width, height)
    if len(sl) == 0 or sl.duration <= 0:
        return flow
    ev = sl.events
    alpha = _alpha(sl)
    bs = params.block_size
    bx = ev.x // bs
    by = ev.y // bs
    for j in range(-(-height // bs)):
        for i in range(-(-width // bs)):
            sel = (bx == i) & (by == j)
            if np.count_nonzero(sel) < params.min_events:
                continue
            coarse, fine = _block_objectives(ev.x[sel].astype(np.float64), ev.y[sel].astype(np.float64),
                                             ev.p[sel], alpha[sel], (i * bs, j * bs), params)
            vel = estimate_block_velocity(coarse, fine, params)
            if sl.direction < 0:
                vel = -vel
            block = (slice(j * bs, (j + 1) * bs), slice(i * bs, (i + 1) * bs))
            flow.u[block] = vel[0]
            flow.v[block] = vel[1]
            flow.valid[block] = True
    return flow
