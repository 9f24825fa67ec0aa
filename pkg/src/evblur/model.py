"""Toy pose predictor: a windowed linear map over fixed input features with a
sigmoid on the heatmap channels. Gradients are analytic.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from . import K
from .events import EventStream, accumulate
from .losses import LAMBDA_G, LossReport, supervised_loss
from .poses import PoseFieldSet
from .pseudo import MaskSet
from .tensorio import load_tensors, save_tensors

EVENT_ONLY = "event"
IMAGE_EVENT = "image+event"
MODALITIES = (EVENT_ONLY, IMAGE_EVENT)
N_OUT = 1 + 3 * K
N_HEAT = 1 + K


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class FrameInput:
    """Network input for one frame: an intensity image and polarity-split event counts."""

    image: np.ndarray  # (H, W) in [0, 1]
    events: np.ndarray  # (2, H, W) positive and negative counts

    @classmethod
    def from_stream(cls, image: np.ndarray, stream: EventStream, t_a: int, t_b: int) -> "FrameInput":
        counts = accumulate(stream.time_window(int(t_a), int(t_b)), mode="split").counts
        return cls(np.asarray(image, dtype=np.float64), counts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape


def input_channels(inp: FrameInput, modality: str) -> np.ndarray:
    """Raw channels the modality may see; the event-only model never sees the image."""
    ev = np.tanh(inp.events / 4.0)
    if modality == EVENT_ONLY:
        return ev
    if modality == IMAGE_EVENT:
        return np.concatenate([inp.image[None], ev])
    raise ModelError(f"unknown modality {modality!r}")


def feature_stack(channels: np.ndarray, sigmas) -> np.ndarray:
    """Each channel followed by Gaussian-smoothed copies; smoothing widens the receptive field."""
    feats = [channels]
    for s in sigmas:
        feats.append(np.stack([gaussian_filter(c, s, mode="constant") for c in channels]))
    return np.concatenate(feats)


def _windows(feats: np.ndarray, r: int) -> np.ndarray:
    """(H*W, C*(2r+1)^2) matrix of zero-padded local windows."""
    c, h, w = feats.shape
    pad = np.pad(feats, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(pad, (2 * r + 1, 2 * r + 1), axis=(1, 2))  # (C, H, W, s, s)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, -1)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class ToyPredictor:
    modality: str
    window_radius: int = 3
    feature_sigmas: tuple = (2.0, 4.0)
    weights: np.ndarray = None  # (N_OUT, F)
    bias: np.ndarray = None  # (N_OUT,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ModelError(f"unknown modality {self.modality!r}")
        self.feature_sigmas = tuple(float(s) for s in self.feature_sigmas)
        nf = self.n_features
        if self.weights is None:
            self.weights = np.zeros((N_OUT, nf))
        if self.bias is None:
            self.bias = np.zeros(N_OUT)
        if self.weights.shape != (N_OUT, nf) or self.bias.shape != (N_OUT,):
            raise ModelError(f"weights {self.weights.shape} do not fit {N_OUT}x{nf}")

    @property
    def n_in(self) -> int:
        return 2 if self.modality == EVENT_ONLY else 3

    @property
    def n_features(self) -> int:
        return self.n_in * (1 + len(self.feature_sigmas)) * (2 * self.window_radius + 1) ** 2

    @classmethod
    def initial(cls, modality: str, window_radius: int = 3, feature_sigmas=(2.0, 4.0),
                rng: np.random.Generator | None = None, scale: float = 1e-3) -> "ToyPredictor":
        m = cls(modality, window_radius, feature_sigmas)
        if rng is not None:
            m.weights = rng.normal(0.0, scale, m.weights.shape)
        m.bias[:N_HEAT] = -3.0  # start with low heat everywhere
        return m

    def copy(self) -> "ToyPredictor":
        return ToyPredictor(self.modality, self.window_radius, self.feature_sigmas,
                            self.weights.copy(), self.bias.copy(), dict(self.meta))

    def design(self, inp: FrameInput) -> np.ndarray:
        return _windows(feature_stack(input_channels(inp, self.modality), self.feature_sigmas), self.window_radius)

    def forward_raw(self, x: np.ndarray, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """(heatmaps (1+K, H, W), offsets (2K, H, W)) from a design matrix."""
        h, w = shape
        z = (x @ self.weights.T + self.bias).T.reshape(N_OUT, h, w)
        return _sigmoid(z[:N_HEAT]), z[N_HEAT:]

    def predict(self, inp: FrameInput) -> PoseFieldSet:
        hm, off = self.forward_raw(self.design(inp), inp.shape)
        return PoseFieldSet(hm[0], hm[1:], off)

    # ---------------------------------------------------------------- training

    def loss_and_grad(self, x: np.ndarray, shape, target: PoseFieldSet, masks: MaskSet | None,
                      lambda_g: float = LAMBDA_G):
        hm, off = self.forward_raw(x, shape)
        pred = PoseFieldSet(hm[0], hm[1:], off)
        rep = supervised_loss(pred, target, masks, lambda_g)
        dz_heat = rep.grad_heatmaps * hm * (1.0 - hm)
        dz = np.concatenate([dz_heat, rep.grad_offsets]).reshape(N_OUT, -1)
        return rep, dz @ x, dz.sum(axis=1)

    def train_step(self, inp_or_design, target: PoseFieldSet, masks: MaskSet | None, lr: float,
                   lambda_g: float = LAMBDA_G) -> LossReport:
        """One in-place gradient-descent step; returns the loss before the update."""
        if isinstance(inp_or_design, FrameInput):
            x, shape = self.design(inp_or_design), inp_or_design.shape
        else:
            x, shape = inp_or_design
        if x.shape[1] != self.n_features:
            raise ModelError(f"input has {x.shape[1]} features, model expects {self.n_features}")
        rep, gw, gb = self.loss_and_grad(x, shape, target, masks, lambda_g)
        if not np.isfinite(rep.total) or not np.all(np.isfinite(gw)):
            raise FloatingPointError(f"non-finite loss {rep.total} (lr={lr}); lower the learning rate")
        if lr:
            self.weights -= lr * gw
            self.bias -= lr * gb
        return rep

    # ---------------------------------------------------------------- storage

    def save(self, path: str | Path, **meta) -> None:
        path = Path(path)
        save_tensors(path, [self.weights, self.bias[None]])
        info = {"modality": self.modality, "window_radius": self.window_radius,
                "feature_sigmas": list(self.feature_sigmas), **self.meta, **meta}
        path.with_suffix(".json").write_text(json.dumps(info, indent=1, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "ToyPredictor":
        path = Path(path)
        info = json.loads(path.with_suffix(".json").read_text())
        w, b = load_tensors(path)
        meta = {k: v for k, v in info.items() if k not in ("modality", "window_radius", "feature_sigmas")}
        return cls(info["modality"], int(info["window_radius"]), tuple(info["feature_sigmas"]),
                   w.astype(np.float64), b[0].astype(np.float64), meta)


def fuse_subteachers(fields_event: PoseFieldSet, fields_fused: PoseFieldSet) -> PoseFieldSet:
    """Mean of the heatmaps; offsets from the image+event sub-teacher."""
    if fields_event.center.shape != fields_fused.center.shape:
        raise ModelError("sub-teacher fields differ in shape")
    return PoseFieldSet((fields_event.center + fields_fused.center) / 2.0,
                        (fields_event.keypoints + fields_fused.keypoints) / 2.0,
                        fields_fused.offsets.copy())
