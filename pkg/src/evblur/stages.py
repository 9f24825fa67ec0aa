"""Four-stage adaptation protocol around the toy predictor.

Stage 1 trains the two teacher sub-models (event-only and image+event) on
source frames whose sharp images are first converted to synthetic blur. Stage 2
freezes the fused teacher, builds confidence-masked pseudo-labels on target
frames and trains the student. Stages 3 and 4 use mutual masks from teacher and
student to retrain the teacher and then the student again.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .blur import blur_from_events
from .config import ConfigError, RunConfig
from .corpus import SOURCE, TARGET, TEST, Corpus, Frame
from .flow import FlowParams
from .metrics import EvalResult, GroundTruth, evaluate
from .model import EVENT_ONLY, IMAGE_EVENT, FrameInput, ToyPredictor, fuse_subteachers
from . import K
from .poses import offset_support, DecodeParams, Pose, PoseFieldSet, decode_poses, encode_targets, pose_nms
from .pseudo import (MaskParams, MaskSet, PseudoLabels, generate_mutual_pseudo_labels,
                     generate_pseudo_labels)
from .tensorio import load_tensor, save_tensor

log = logging.getLogger(__name__)

NETWORK_INPUT = "network_input"
BLUR_SYNTHESIS = "blur_synthesis"
EVALUATION = "evaluation"

CHECKPOINTS = {
    1: ("stage1_teacher_event", "stage1_teacher_image"),
    2: ("stage2_student",),
    3: ("stage3_teacher_event", "stage3_teacher_image"),
    4: ("stage4_student",),
}


@dataclass
class Sample:
    """One training example: inputs, targets, masks (None means unit masks)."""

    key: str
    inputs: FrameInput
    targets: PoseFieldSet
    masks: MaskSet | None = None


@dataclass
class Teacher:
    event: ToyPredictor
    image: ToyPredictor

    def predict(self, inp: FrameInput) -> PoseFieldSet:
        return fuse_subteachers(self.event.predict(inp), self.image.predict(inp))


@dataclass
class StageResult:
    stage: int
    checkpoints: list[Path]
    metrics: list[dict] = field(default_factory=list)


class Workspace:
    """Shared state for running stages: config, corpus, output directory and caches."""

    def __init__(self, cfg: RunConfig, corpus: Corpus | str | Path, out_dir: str | Path):
        self.cfg = cfg
        self.corpus = corpus if isinstance(corpus, Corpus) else Corpus(corpus)
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "cache").mkdir(exist_ok=True)
        self._inputs: dict[tuple[str, str], FrameInput] = {}
        c = cfg.pose
        self.decode = DecodeParams(c.max_centers, c.center_threshold, c.nms_oks_threshold, c.local_max_window)
        self.res = (self.corpus.info["config"]["width"], self.corpus.info["config"]["height"])

    # ------------------------------------------------------------------ inputs

    def _events_for(self, frame: Frame, image: np.ndarray) -> FrameInput:
        t_a, t_b = frame.exposure_window()
        return FrameInput.from_stream(image, frame.events(), t_a, t_b)

    def synthetic_blur(self, frame: Frame) -> np.ndarray:
        """Blur synthesized from the sharp frame and its events (cached on disk)."""
        path = self.out / "cache" / f"synth_{frame.sequence}_{frame.index:04d}.tnsr"
        if path.exists():
            self.corpus.record(BLUR_SYNTHESIS, "synthetic-cache", frame.key)
            return load_tensor(path).astype(np.float64)
        c = self.corpus.info["config"]
        sharp = frame.sharp(BLUR_SYNTHESIS)
        f = self.cfg.flow
        sample = blur_from_events(sharp, frame.events(), frame.t_ref, c["delta_tau"], c["n_e"],
                                  self.cfg.blur.epsilon, self.cfg.blur.hole_fill,
                                  FlowParams(f.block_size, f.search_radius, f.refine_steps, f.min_events))
        save_tensor(path, sample.blur)
        return sample.blur

    def source_input(self, frame: Frame) -> FrameInput:
        key = ("synth", frame.key)
        if key not in self._inputs:
            blur = self.synthetic_blur(frame)
            self.corpus.record(NETWORK_INPUT, "synthetic-blur", frame.key)
            self._inputs[key] = self._events_for(frame, blur)
        return self._inputs[key]

    def blur_input(self, frame: Frame) -> FrameInput:
        key = ("blur", frame.key)
        if key not in self._inputs:
            self._inputs[key] = self._events_for(frame, frame.blur(NETWORK_INPUT))
        return self._inputs[key]

    def sharp_input(self, frame: Frame) -> FrameInput:
        """Sharp test frames, for the sharp column of the evaluation table only."""
        if frame.split != TEST:
            raise ConfigError("sharp frames are network inputs only for test evaluation")
        key = ("sharp", frame.key)
        if key not in self._inputs:
            self._inputs[key] = self._events_for(frame, frame.sharp(NETWORK_INPUT))
        return self._inputs[key]

    # ------------------------------------------------------------------ samples

    def gt_targets(self, frame: Frame) -> PoseFieldSet:
        poses = [p for p, _ in frame.ground_truth()]
        return encode_targets(poses, self.res, self.cfg.pose.sigma)

    def source_samples(self) -> list[Sample]:
        out = []
        for fr in self.corpus.frames(SOURCE):
            tgt = self.gt_targets(fr)
            masks = source_masks(fr, self)
            out.append(Sample(fr.key, self.source_input(fr), tgt, masks))
        return out

    def mask_params(self, mutual: bool) -> MaskParams:
        m = self.cfg.mask
        return MaskParams(m.th_mutual if mutual else m.th, m.near_side, m.background_value, m.gate_offsets)

    def pseudo_samples(self, teacher: Teacher, student: ToyPredictor | None = None,
                       unit_masks: bool = False) -> tuple[list[Sample], list[PseudoLabels]]:
        """Pseudo-labelled target samples: single masks without a student, mutual masks with one."""
        samples, labels = [], []
        for fr in self.corpus.frames(TARGET):
            inp = self.blur_input(fr)
            t_fields = teacher.predict(inp)
            if student is None:
                pl = generate_pseudo_labels(t_fields, self.decode, self.mask_params(False), sigma=self.cfg.pose.sigma)
            else:
                pl = generate_mutual_pseudo_labels(t_fields, student.predict(inp), self.decode,
                                                   self.mask_params(True), sigma=self.cfg.pose.sigma)
            masks = MaskSet.ones(*self.res) if unit_masks else pl.masks
            samples.append(Sample(fr.key, inp, pl.targets, masks))
            labels.append(pl)
        return samples, labels

    # ------------------------------------------------------------------ models

    def new_model(self, modality: str, stage: int, salt: int = 0) -> ToyPredictor:
        t = self.cfg.train
        rng = np.random.default_rng([self.cfg.seed, stage, salt])
        return ToyPredictor.initial(modality, t.window_radius, tuple(t.feature_sigmas), rng, t.init_scale)

    def ckpt(self, name: str) -> Path:
        return self.out / f"{name}.tnsr"

    def load(self, name: str) -> ToyPredictor:
        p = self.ckpt(name)
        if not p.exists():
            raise ConfigError(f"missing checkpoint {p}; run the earlier stage first")
        return ToyPredictor.load(p)

    def save(self, model: ToyPredictor, name: str, stage: int) -> Path:
        p = self.ckpt(name)
        model.save(p, stage=stage, seed=self.cfg.seed, config=self.cfg.to_dict())
        return p

    def teacher(self, stage: int) -> Teacher:
        ev, im = CHECKPOINTS[stage]
        return Teacher(self.load(ev), self.load(im))

    # ------------------------------------------------------------------ evaluation

    def evaluate(self, predict: Callable[[FrameInput], PoseFieldSet], split: str = "blur") -> EvalResult:
        frames = self.corpus.frames(TEST)
        preds, gts = {}, {}
        for fr in frames:
            inp = self.blur_input(fr) if split == "blur" else self.sharp_input(fr)
            fields = predict(inp)
            preds[fr.key] = pose_nms(decode_poses(fields, self.decode), self.decode.nms_oks_threshold)
            gts[fr.key] = [GroundTruth(p, b) for p, b in fr.ground_truth()]
        return evaluate(preds, gts, self.cfg.pose.kappa)


def source_masks(frame: Frame, ws: Workspace) -> MaskSet:
    """Masks for ground-truth supervision.

    "support": unit heatmap mask, offsets supervised only where targets define them.
    "unit": every element weighted 1. "gt": the pseudo-label mask rules applied to
    the GT poses with full confidence.
    """
    from .pseudo import build_single_masks

    mode = ws.cfg.train.stage1_masks
    gt = frame.ground_truth()
    poses = [p for p, _ in gt]
    w, h = ws.res
    if mode == "unit":
        return MaskSet.ones(w, h)
    if mode == "support":
        sup = offset_support(poses, ws.res).astype(np.float64)
        return MaskSet(np.ones((1 + K, h, w)), np.repeat(sup[None], K, axis=0))
    if mode == "gt":
        return build_single_masks(poses, [1.0] * len(poses), [b for _, b in gt], ws.mask_params(False), ws.res)
    raise ConfigError(f"unknown train.stage1_masks {mode!r}")


def interleave(a: Sequence[Sample], b: Sequence[Sample]) -> list[Sample]:
    """Alternate the two sequences 1:1, cycling the shorter one."""
    if not a or not b:
        return list(a) + list(b)
    n = max(len(a), len(b))
    out = []
    for i in range(n):
        out.append(a[i % len(a)])
        out.append(b[i % len(b)])
    return out


def train(model: ToyPredictor, samples: Sequence[Sample], epochs: int, lr: float, lambda_g: float,
          rng: np.random.Generator, validate: Callable[[], float] | None = None,
          keep_pairs: bool = False, validate_every: int = 1) -> list[dict]:
    """Plain gradient descent, one sample per step, deterministic shuffling per epoch."""
    designs: dict[str, np.ndarray] = {}
    rows = []
    for epoch in range(epochs):
        if keep_pairs and len(samples) % 2 == 0:
            pairs = rng.permutation(len(samples) // 2)
            order = np.stack([2 * pairs, 2 * pairs + 1], axis=1).ravel()
        else:
            order = rng.permutation(len(samples))
        lh = lo = 0.0
        for i in order:
            s = samples[i]
            key = f"{model.modality}:{s.key}:{id(s.inputs)}"
            if key not in designs:
                designs[key] = model.design(s.inputs).astype(np.float32)
            rep = model.train_step((designs[key].astype(np.float64), s.inputs.shape), s.targets, s.masks, lr, lambda_g)
            lh += rep.heatmap_loss
            lo += rep.offset_loss
        row = {"epoch": epoch + 1, "heatmap_loss": lh / len(samples), "offset_loss": lo / len(samples),
               "mAP_val": float("nan")}
        if validate and ((epoch + 1) % max(validate_every, 1) == 0 or epoch + 1 == epochs):
            row["mAP_val"] = validate()
        log.info("epoch %d %s: heatmap %.5f offset %.4f mAP_val %.4f", epoch + 1, model.modality,
                 row["heatmap_loss"], row["offset_loss"], row["mAP_val"])
        rows.append(row)
    return rows


def write_metrics(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["model", "epoch", "heatmap_loss", "offset_loss", "mAP_val"])
        w.writeheader()
        for r in rows:
            w.writerow(r)


def _tag(rows, name):
    return [{"model": name, **r} for r in rows]


def run_stage(stage: int, ws: Workspace, *, masking: bool = True, name: str | None = None) -> StageResult:
    """Run one stage; earlier stages' checkpoints must already exist in the workspace."""
    cfg, t = ws.cfg, ws.cfg.train
    rng = np.random.default_rng([cfg.seed, stage, 7])
    rows: list[dict] = []
    ckpts: list[Path] = []
    val = lambda m: (lambda: ws.evaluate(m.predict, "blur").mAP)

    if stage == 1:
        src = ws.source_samples()
        for modality, nm in zip((EVENT_ONLY, IMAGE_EVENT), CHECKPOINTS[1]):
            m = ws.new_model(modality, 1, salt=len(ckpts))
            rows += _tag(train(m, src, t.epochs_stage1, t.lr, t.lambda_g, rng, val(m),
                               validate_every=t.validate_every), nm)
            ckpts.append(ws.save(m, nm, 1))
    elif stage == 2:
        teacher = ws.teacher(1)
        tgt, _ = ws.pseudo_samples(teacher, unit_masks=not masking)
        student = ws.load(CHECKPOINTS[1][1])  # warm start from the image+event sub-teacher
        mix = interleave(ws.source_samples(), tgt)
        nm = name or CHECKPOINTS[2][0]
        rows += _tag(train(student, mix, t.epochs_adapt, t.lr, t.lambda_g, rng, val(student),
                           keep_pairs=True, validate_every=t.validate_every), nm)
        ckpts.append(ws.save(student, nm, 2))
    elif stage == 3:
        teacher = ws.teacher(1)
        student = ws.load(CHECKPOINTS[2][0])
        tgt, _ = ws.pseudo_samples(teacher, student, unit_masks=not masking)
        mix = interleave(ws.source_samples(), tgt)
        for m, nm in zip((teacher.event, teacher.image), CHECKPOINTS[3]):
            rows += _tag(train(m, mix, t.epochs_adapt, t.lr, t.lambda_g, rng, val(m),
                               keep_pairs=True, validate_every=t.validate_every), nm)
            ckpts.append(ws.save(m, nm, 3))
    elif stage == 4:
        teacher = ws.teacher(3)
        student = ws.load(CHECKPOINTS[2][0])
        tgt, _ = ws.pseudo_samples(teacher, student, unit_masks=not masking)
        mix = interleave(ws.source_samples(), tgt)
        nm = name or CHECKPOINTS[4][0]
        rows += _tag(train(student, mix, t.epochs_adapt, t.lr, t.lambda_g, rng, val(student),
                           keep_pairs=True, validate_every=t.validate_every), nm)
        ckpts.append(ws.save(student, nm, 4))
    else:
        raise ConfigError(f"stage must be 1-4, got {stage}")
    write_metrics(ws.out / f"{name or f'stage{stage}'}_metrics.csv", rows)
    return StageResult(stage, ckpts, rows)


def audit_stage1_inputs(corpus: Corpus) -> list[tuple[str, str, str]]:
    """Audit entries where a raw sharp training image was used as network input."""
    return [a for a in corpus.audit if a[0] == NETWORK_INPUT and a[1] == "sharp" and not a[2].startswith(TEST + "/")]


def evaluate_checkpoints(ws: Workspace) -> dict:
    """Blur/sharp/average mAP and mAR for every available stage model."""
    table = {}
    models: dict[str, Callable[[FrameInput], PoseFieldSet]] = {}
    if ws.ckpt(CHECKPOINTS[1][0]).exists():
        models["stage1_teacher"] = ws.teacher(1).predict
    for nm in ("stage2_student", "stage2_nomask_student", "stage4_student"):
        if ws.ckpt(nm).exists():
            models[nm] = ws.load(nm).predict
    if ws.ckpt(CHECKPOINTS[3][0]).exists():
        models["stage3_teacher"] = ws.teacher(3).predict
    for name, fn in models.items():
        blur = ws.evaluate(fn, "blur")
        sharp = ws.evaluate(fn, "sharp")
        table[name] = {"blur_mAP": blur.mAP, "blur_mAR": blur.mAR, "sharp_mAP": sharp.mAP,
                       "sharp_mAR": sharp.mAR, "avg_mAP": (blur.mAP + sharp.mAP) / 2,
                       "avg_mAR": (blur.mAR + sharp.mAR) / 2}
    return table


def run_pipeline(cfg: RunConfig, seed: int, corpus_root: str | Path, out_dir: str | Path,
                 ablation: bool = True) -> dict:
    """Generate (or reuse) the corpus for ``seed``, run stages 1-4 and evaluate every checkpoint."""
    from .config import override
    from .corpus import generate_corpus

    cfg = override(cfg, {"seed": seed})
    corpus_root = Path(corpus_root)
    if not (corpus_root / "corpus.json").exists():
        generate_corpus(cfg.corpus, seed, corpus_root)
    ws = Workspace(cfg, corpus_root, out_dir)
    (ws.out / "config.yaml").write_text(cfg.dump())
    for stage in (1, 2, 3, 4):
        run_stage(stage, ws)
    if ablation:
        run_stage(2, ws, masking=False, name="stage2_nomask_student")
    table = evaluate_checkpoints(ws)
    leaks = audit_stage1_inputs(ws.corpus)
    result = {"seed": seed, "models": table, "sharp_input_leaks": len(leaks)}
    (ws.out / "results.json").write_text(json.dumps(result, indent=1, sort_keys=True))
    return result
