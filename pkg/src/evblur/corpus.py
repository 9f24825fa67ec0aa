"""Two-domain synthetic corpus: sharp source frames, blurred target frames and
a test split carrying both, each with the event stream of its sequence.

Layout::

    <root>/<split>/<seq>/frame_%04d.png   sharp render at the frame time
    <root>/<split>/<seq>/blur_%04d.png    dense temporal average over the exposure
    <root>/<split>/<seq>/events.evt1
    <root>/<split>/<seq>/poses.json       ground truth (not written for train-target)
    <root>/<split>/<seq>/meta.json
    <root>/sealed/train-target/<seq>/poses.json   held back for evaluation only
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .blur import load_png, save_png
from .config import CorpusConfig
from .events import EventStream, load_events, save_events
from .poses import InstanceBox, Pose, poses_from_json
from .sim import Scene, SceneParams, emit_events, oracle_blur, random_scene, render_sharp

SOURCE, TARGET, TEST = "train-source", "train-target", "test"
SPLITS = (SOURCE, TARGET, TEST)
SEALED = "sealed"
_HAS_SHARP = {SOURCE: True, TARGET: False, TEST: True}
_HAS_BLUR = {SOURCE: False, TARGET: True, TEST: True}


def frame_times(cfg: CorpusConfig) -> np.ndarray:
    half = max(cfg.exposure / 2.0, cfg.n_e * cfg.delta_tau) + cfg.delta_tau
    return np.round(np.linspace(half, cfg.duration - half, cfg.frames_per_sequence)).astype(np.int64)


def scene_params(cfg: CorpusConfig) -> SceneParams:
    return SceneParams(width=cfg.width, height=cfg.height, duration=float(cfg.duration),
                       min_figures=cfg.min_figures, max_figures=cfg.max_figures,
                       contrast_threshold=cfg.contrast_threshold)


def _pose_entry(p: dict, index: int, t: int) -> dict:
    x, y, w, h = p["box"]
    return {"center": [float(v) for v in p["center"]],
            "keypoints": [[float(a), float(b), 1] for a, b in p["keypoints"]],
            "score": 1.0, "box": [x, y, w, h]}


def _write_sequence(root: Path, split: str, seq: int, scene: Scene, cfg: CorpusConfig, seed: int) -> None:
    d = root / split / f"seq_{seq:03d}"
    d.mkdir(parents=True, exist_ok=True)
    stream = emit_events(scene, 0.0, float(cfg.duration), step=cfg.delta_tau / cfg.emission_oversample)
    save_events(stream, d / "events.evt1")
    times = frame_times(cfg)
    frames = []
    for i, t in enumerate(times):
        if _HAS_SHARP[split]:
            save_png(render_sharp(scene, float(t)), d / f"frame_{i:04d}.png")
        if _HAS_BLUR[split]:
            save_png(oracle_blur(scene, float(t), float(cfg.exposure), cfg.oracle_samples), d / f"blur_{i:04d}.png")
        frames.append({"index": i, "t_ref": int(t),
                       "people": [_pose_entry(p, i, int(t)) for p in scene.poses(float(t))]})
    gt_dir = root / SEALED / split / d.name if split == TARGET else d
    gt_dir.mkdir(parents=True, exist_ok=True)
    (gt_dir / "poses.json").write_text(json.dumps({"frames": frames}, indent=1))
    meta = {"seed": seed, "sequence": seq, "split": split, "t_ref": [int(t) for t in times],
            "exposure": cfg.exposure, "delta_tau": cfg.delta_tau, "n_e": cfg.n_e,
            "contrast_threshold": cfg.contrast_threshold, "width": cfg.width, "height": cfg.height,
            "n_events": len(stream)}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def generate_corpus(cfg: CorpusConfig, seed: int, root: str | Path) -> Path:
    """Write the corpus; a pure function of (cfg, seed)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counts = {SOURCE: cfg.n_source, TARGET: cfg.n_target, TEST: cfg.n_test}
    for s_idx, split in enumerate(SPLITS):
        n_seq = -(-counts[split] // cfg.frames_per_sequence)
        for seq in range(n_seq):
            rng = np.random.default_rng([seed, s_idx, seq])
            _write_sequence(root, split, seq, random_scene(rng, scene_params(cfg)), cfg, seed)
    (root / "corpus.json").write_text(json.dumps({"seed": seed, "config": asdict(cfg)}, indent=1, sort_keys=True))
    return root


# ---------------------------------------------------------------------------
# loading


@dataclass
class Frame:
    split: str
    sequence: str
    index: int
    t_ref: int
    directory: Path
    corpus: "Corpus" = field(repr=False)

    @property
    def key(self) -> str:
        return f"{self.split}/{self.sequence}/{self.index}"

    def sharp(self, purpose: str) -> np.ndarray:
        self.corpus.record(purpose, "sharp", self.key)
        return load_png(self.directory / f"frame_{self.index:04d}.png")

    def blur(self, purpose: str) -> np.ndarray:
        self.corpus.record(purpose, "blur", self.key)
        return load_png(self.directory / f"blur_{self.index:04d}.png")

    def events(self) -> EventStream:
        return self.corpus.events(self.directory)

    def exposure_window(self) -> tuple[int, int]:
        e = self.corpus.meta(self.directory)["exposure"]
        return self.t_ref - e // 2, self.t_ref + e - e // 2

    def ground_truth(self) -> list[tuple[Pose, InstanceBox]]:
        return self.corpus.ground_truth(self)


class Corpus:
    """Read access to a corpus with an audit log of every image read and its purpose."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        if not (self.root / "corpus.json").exists():
            raise FileNotFoundError(f"{self.root} is not a corpus (missing corpus.json)")
        self.info = json.loads((self.root / "corpus.json").read_text())
        self.audit: list[tuple[str, str, str]] = []
        self._events: dict[Path, EventStream] = {}
        self._meta: dict[Path, dict] = {}

    def record(self, purpose: str, kind: str, key: str) -> None:
        self.audit.append((purpose, kind, key))

    def meta(self, d: Path) -> dict:
        if d not in self._meta:
            self._meta[d] = json.loads((d / "meta.json").read_text())
        return self._meta[d]

    def events(self, d: Path) -> EventStream:
        if d not in self._events:
            self._events[d] = load_events(d / "events.evt1")
        return self._events[d]

    def frames(self, split: str) -> list[Frame]:
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        out = []
        n_max = self.info["config"][{SOURCE: "n_source", TARGET: "n_target", TEST: "n_test"}[split]]
        for d in sorted((self.root / split).iterdir()):
            meta = self.meta(d)
            for i, t in enumerate(meta["t_ref"]):
                if len(out) < n_max:
                    out.append(Frame(split, d.name, i, int(t), d, self))
        return out

    def ground_truth(self, frame: Frame) -> list[tuple[Pose, InstanceBox]]:
        d = frame.directory if frame.split != TARGET else self.root / SEALED / TARGET / frame.sequence
        doc = json.loads((d / "poses.json").read_text())
        entry = doc["frames"][frame.index]
        out = []
        for pose, raw in zip(poses_from_json(entry), entry["people"]):
            x, y, w, h = raw["box"]
            out.append((pose, InstanceBox(h, w, x, y)))
        return out
