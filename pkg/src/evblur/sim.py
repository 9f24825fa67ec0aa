"""Synthetic event-camera scenes: articulated stick figures over a static texture.

Provides sharp rendering, DVS-style event emission from log intensity,
dense temporal-average blur, and ground-truth 14-keypoint poses.
Times are microseconds throughout.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter, map_coordinates

from . import K
from .events import EventStream

JOINT_NAMES = (
    "head", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
FLIP_PAIRS = ((2, 5), (3, 6), (4, 7), (8, 11), (9, 12), (10, 13))
# capsule limbs as joint index pairs; -1 is the pelvis (hip midpoint)
LIMBS = (
    (0, 1), (1, -1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7),
    (8, 11), (8, 9), (9, 10), (11, 12), (12, 13),
)
# bone lengths at unit scale (pixels for a 64-pixel-wide sensor)
BONES = dict(torso=8.0, neck=3.5, shoulder=3.0, hip=2.0, upper_arm=5.0, forearm=4.5,
             thigh=6.0, shin=6.0)
ANGLE_NAMES = ("torso", "head", "r_upper_arm", "r_forearm", "l_upper_arm", "l_forearm",
               "r_thigh", "r_shin", "l_thigh", "l_shin")
REST_ANGLES = np.array([0.0, 0.0, -0.35, -0.1, 0.35, 0.1, -0.12, 0.0, 0.12, 0.0])

assert len(JOINT_NAMES) == K


class SceneError(ValueError):
    pass


@dataclass
class Trajectory:
    """Piecewise-cubic (natural spline) vector trajectory through knots."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self._spline = (CubicSpline(self.knots, self.values, bc_type="natural")
                        if len(self.knots) > 1 else None)

    def __call__(self, t: float) -> np.ndarray:
        if self._spline is None:
            return self.values[0].copy()
        return np.asarray(self._spline(t), dtype=np.float64)

    @classmethod
    def constant(cls, value) -> "Trajectory":
        return cls(np.array([0.0]), np.asarray(value, dtype=np.float64)[None])

    @classmethod
    def linear(cls, start, velocity, t0: float, t1: float) -> "Trajectory":
        start = np.asarray(start, dtype=np.float64)
        velocity = np.asarray(velocity, dtype=np.float64)
        return cls(np.array([t0, t1]), np.stack([start, start + velocity * (t1 - t0)]))


@dataclass
class Figure:
    root: Trajectory  # pelvis position, pixels
    angles: Trajectory  # joint angles, radians, ordered as ANGLE_NAMES
    scale: float = 1.0
    intensity: float = 0.85
    limb_radius: float = 1.2
    head_radius: float = 2.0

    def keypoints(self, t: float) -> np.ndarray:
        b = {k: v * self.scale for k, v in BONES.items()}
        root = self.root(t)
        a = self.angles(t)

        def down(angle):
            return np.array([np.sin(angle), np.cos(angle)])

        up = -down(a[0])
        side = np.array([np.cos(a[0]), np.sin(a[0])])
        neck = root + b["torso"] * up
        head = neck - b["neck"] * down(a[0] + a[1])
        r_sh, l_sh = neck - b["shoulder"] * side, neck + b["shoulder"] * side
        r_el = r_sh + b["upper_arm"] * down(a[0] + a[2])
        r_wr = r_el + b["forearm"] * down(a[0] + a[2] + a[3])
        l_el = l_sh + b["upper_arm"] * down(a[0] + a[4])
        l_wr = l_el + b["forearm"] * down(a[0] + a[4] + a[5])
        r_hip, l_hip = root - b["hip"] * side, root + b["hip"] * side
        r_kn = r_hip + b["thigh"] * down(a[6])
        r_an = r_kn + b["shin"] * down(a[6] + a[7])
        l_kn = l_hip + b["thigh"] * down(a[8])
        l_an = l_kn + b["shin"] * down(a[8] + a[9])
        return np.stack([head, neck, r_sh, r_el, r_wr, l_sh, l_el, l_wr,
                         r_hip, r_kn, r_an, l_hip, l_kn, l_an])

    def center(self, t: float) -> np.ndarray:
        return self.keypoints(t).mean(axis=0)

    def box(self, t: float) -> tuple[float, float, float, float]:
        """(x, y, w, h) bounding box of the rendered figure."""
        kp = self.keypoints(t)
        pad = max(self.limb_radius, self.head_radius * self.scale)
        x0, y0 = kp.min(axis=0) - pad
        x1, y1 = kp.max(axis=0) + pad
        return float(x0), float(y0), float(x1 - x0), float(y1 - y0)

    def coverage(self, t: float, width: int, height: int) -> np.ndarray:
        kp = self.keypoints(t)
        pelvis = (kp[8] + kp[11]) / 2.0
        pts = lambda i: pelvis if i < 0 else kp[i]
        lo = np.floor(kp.min(axis=0) - 4 * self.scale - 2).astype(int)
        hi = np.ceil(kp.max(axis=0) + 4 * self.scale + 2).astype(int)
        x0, y0 = max(lo[0], 0), max(lo[1], 0)
        x1, y1 = min(hi[0], width - 1), min(hi[1], height - 1)
        cov = np.zeros((height, width))
        if x1 < x0 or y1 < y0:
            return cov
        ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1].astype(np.float64)
        dist = np.full(xs.shape, np.inf)
        for i, j in LIMBS:
            dist = np.minimum(dist, _segment_distance(xs, ys, pts(i), pts(j)))
        c = np.clip(self.limb_radius + 0.5 - dist, 0.0, 1.0)
        hd = np.hypot(xs - kp[0, 0], ys - kp[0, 1])
        c = np.maximum(c, np.clip(self.head_radius * self.scale + 0.5 - hd, 0.0, 1.0))
        cov[y0:y1 + 1, x0:x1 + 1] = c
        return cov


def _segment_distance(xs, ys, a, b):
    d = b - a
    denom = float(d @ d)
    if denom < 1e-12:
        return np.hypot(xs - a[0], ys - a[1])
    s = np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(xs - (a[0] + s * d[0]), ys - (a[1] + s * d[1]))


@dataclass
class TexturedPatch:
    """Rigid square sprite with a smooth random texture; used for flow checks."""

    center: Trajectory
    half_size: float
    texture: np.ndarray  # values in [0, 1], sampled over the square
    order: int = 1  # 0 samples texels without interpolation (instantaneous edges)

    def coverage_and_value(self, t: float, width: int, height: int):
        c = self.center(t)
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        dx, dy = xs - c[0], ys - c[1]
        cov = (np.clip(self.half_size + 0.5 - np.abs(dx), 0, 1)
               * np.clip(self.half_size + 0.5 - np.abs(dy), 0, 1))
        n = self.texture.shape[0]
        scale = (n - 1) / (2.0 * self.half_size)
        u = (dx + self.half_size) * scale
        v = (dy + self.half_size) * scale
        val = map_coordinates(self.texture, [v.ravel(), u.ravel()], order=self.order, mode="nearest")
        return cov, val.reshape(height, width)


def make_texture(rng: np.random.Generator, size: int, smooth: float, lo: float, hi: float) -> np.ndarray:
    tex = gaussian_filter(rng.standard_normal((size, size)), smooth, mode="wrap")
    tex = (tex - tex.min()) / max(np.ptp(tex), 1e-12)
    return lo + (hi - lo) * tex


@dataclass
class Scene:
    width: int
    height: int
    duration: float  # microseconds
    background: np.ndarray
    figures: list[Figure] = field(default_factory=list)
    patches: list[TexturedPatch] = field(default_factory=list)
    contrast_threshold: float = 0.2
    log_eps: float = 0.02

    def poses(self, t: float) -> list[dict]:
        """Ground-truth annotations of every figure at time t."""
        return [dict(center=f.center(t), keypoints=f.keypoints(t), box=f.box(t)) for f in self.figures]


def render_sharp(scene: Scene, t: float) -> np.ndarray:
    if not (0.0 <= t <= scene.duration):
        raise SceneError(f"time {t} outside scene duration [0, {scene.duration}]")
    img = scene.background.astype(np.float64).copy()
    for patch in scene.patches:
        cov, val = patch.coverage_and_value(t, scene.width, scene.height)
        img = img * (1.0 - cov) + val * cov
    for fig in scene.figures:
        cov = fig.coverage(t, scene.width, scene.height)
        img = img * (1.0 - cov) + fig.intensity * cov
    return np.clip(img, 0.0, 1.0)


def oracle_blur(scene: Scene, t_center: float, exposure: float, n_samples: int = 64) -> np.ndarray:
    """Mean of ``n_samples`` renders at the midpoints of equal sub-intervals of the exposure."""
    if n_samples < 1:
        raise SceneError("n_samples must be positive")
    ts = t_center - exposure / 2.0 + (np.arange(n_samples) + 0.5) * exposure / n_samples
    if ts[0] < 0 or ts[-1] > scene.duration:
        raise SceneError("exposure window leaves the scene duration")
    acc = np.zeros((scene.height, scene.width))
    for t in ts:
        acc += render_sharp(scene, float(t))
    return acc / n_samples


def emit_events(scene: Scene, t0: float, t1: float, step: float = 125.0) -> EventStream:
    """DVS emission: an event each time log intensity moves one threshold from the last reference."""
    if not t0 < t1:
        raise SceneError("t0 must be before t1")
    n_steps = max(1, int(np.ceil((t1 - t0) / step)))
    times = np.linspace(t0, t1, n_steps + 1)
    c = scene.contrast_threshold
    prev = np.log(render_sharp(scene, float(times[0])) + scene.log_eps).ravel()
    ref = prev.copy()
    chunks = []
    for j in range(1, n_steps + 1):
        cur = np.log(render_sharp(scene, float(times[j])) + scene.log_eps).ravel()
        diff = cur - ref
        n = np.floor(np.abs(diff) / c).astype(np.int64)
        hit = np.flatnonzero(n > 0)
        if len(hit):
            counts = n[hit]
            pix = np.repeat(hit, counts)
            sign = np.sign(diff[hit]).astype(np.int64)
            sgn = np.repeat(sign, counts)
            k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts) + 1
            level = ref[pix] + sgn * k * c
            step_change = cur[pix] - prev[pix]
            safe = np.where(np.abs(step_change) > 1e-12, step_change, 1.0)
            frac = np.where(np.abs(step_change) > 1e-12, (level - prev[pix]) / safe, 1.0)
            ts = times[j - 1] + np.clip(frac, 0.0, 1.0) * (times[j] - times[j - 1])
            chunks.append((np.round(ts).astype(np.int64), pix, sgn))
            ref[hit] += sign * counts * c
        prev = cur
    if not chunks:
        return EventStream.empty(scene.width, scene.height)
    t = np.concatenate([ch[0] for ch in chunks])
    pix = np.concatenate([ch[1] for ch in chunks])
    p = np.concatenate([ch[2] for ch in chunks])
    return EventStream.from_arrays(scene.width, scene.height, t, pix % scene.width, pix // scene.width, p)


def translation_displacement(scene: Scene, t_from: float, t_to: float) -> np.ndarray:
    """Displacement of the single rigidly moving element between two times."""
    movers = [f.root for f in scene.figures] + [p.center for p in scene.patches]
    if len(movers) != 1:
        raise SceneError("translation_displacement needs exactly one moving element")
    return movers[0](t_to) - movers[0](t_from)


# ---------------------------------------------------------------------------
# random scene generation


@dataclass(frozen=True)
class SceneParams:
    width: int = 64
    height: int = 64
    duration: float = 60_000.0
    min_figures: int = 1
    max_figures: int = 3
    speed_range: tuple[float, float] = (0.4e-3, 1.2e-3)  # pixels per microsecond at 64 px width
    swing_amplitude: float = 0.5
    swing_period: float = 40_000.0
    scale_range: tuple[float, float] = (0.9, 1.15)
    intensity_range: tuple[float, float] = (0.7, 0.95)
    background_range: tuple[float, float] = (0.1, 0.3)
    background_smooth: float = 6.0
    contrast_threshold: float = 0.2
    margin: float = 2.0
    min_center_separation: float = 14.0


def random_figure(rng: np.random.Generator, p: SceneParams, knots: np.ndarray) -> Figure:
    unit = p.width / 64.0
    scale = rng.uniform(*p.scale_range) * unit
    speed = rng.uniform(*p.speed_range) * unit
    heading = rng.uniform(0, 2 * np.pi)
    vel = speed * np.array([np.cos(heading), 0.5 * np.sin(heading)])
    # place the pelvis so the whole figure stays inside the frame over the duration
    up_ext = (BONES["torso"] + BONES["neck"] + 2.5) * scale + p.margin
    down_ext = (BONES["thigh"] + BONES["shin"] + 1.5) * scale + p.margin
    side_ext = (BONES["shoulder"] + BONES["upper_arm"] + BONES["forearm"] + 1.5) * scale + p.margin
    travel = vel * p.duration
    xlo = side_ext + max(0.0, -travel[0])
    xhi = p.width - side_ext - max(0.0, travel[0])
    ylo = up_ext + max(0.0, -travel[1])
    yhi = p.height - down_ext - max(0.0, travel[1])
    if xhi <= xlo:
        vel[0] = 0.0
        xlo, xhi = side_ext, p.width - side_ext
    if yhi <= ylo:
        vel[1] = 0.0
        ylo, yhi = up_ext, p.height - down_ext
    start = np.array([rng.uniform(xlo, xhi), rng.uniform(ylo, yhi)])
    root = Trajectory.linear(start, vel, 0.0, p.duration)
    phase = rng.uniform(0, 2 * np.pi)
    amp = p.swing_amplitude * rng.uniform(0.5, 1.0)
    swing = np.sin(2 * np.pi * knots / p.swing_period + phase)
    pattern = np.array([0.0, 0.0, 1.0, 0.4, -1.0, -0.4, -0.6, 0.5, 0.6, 0.5])
    jitter = rng.normal(0.0, 0.08, size=len(REST_ANGLES))
    angles = REST_ANGLES + jitter + amp * swing[:, None] * pattern[None, :]
    angles[:, 7] = np.abs(angles[:, 7])
    angles[:, 9] = -np.abs(angles[:, 9])
    return Figure(root=root, angles=Trajectory(knots, angles), scale=scale,
                  intensity=rng.uniform(*p.intensity_range), limb_radius=1.2 * unit)


def _inside(fig: Figure, p: SceneParams, ts) -> bool:
    for t in ts:
        kp = fig.keypoints(t)
        if kp.min() < p.margin or kp[:, 0].max() > p.width - 1 - p.margin or kp[:, 1].max() > p.height - 1 - p.margin:
            return False
    return True


def random_scene(rng: np.random.Generator, p: SceneParams = SceneParams()) -> Scene:
    bg = make_texture(rng, max(p.width, p.height), p.background_smooth * p.width / 64.0,
                      *p.background_range)[: p.height, : p.width]
    knots = np.linspace(0.0, p.duration, 9)
    check_ts = np.linspace(0.0, p.duration, 13)
    n_fig = int(rng.integers(p.min_figures, p.max_figures + 1))
    figures: list[Figure] = []
    for _ in range(200):
        if len(figures) == n_fig:
            break
        fig = random_figure(rng, p, knots)
        if not _inside(fig, p, check_ts):
            continue
        sep = p.min_center_separation * p.width / 64.0
        if all(np.min([np.linalg.norm(fig.center(t) - g.center(t)) for t in check_ts]) >= sep
               for g in figures):
            figures.append(fig)
    return Scene(p.width, p.height, p.duration, bg, figures,
                 contrast_threshold=p.contrast_threshold)
