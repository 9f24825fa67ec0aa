"""Command-line entry point: ``evblur <subcommand> ...``.

Exit codes: 0 success, 1 validation or runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import CONFIG_ENV, ConfigError, RunConfig, load_config, override

log = logging.getLogger("evblur")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help=f"YAML run config (default: ${CONFIG_ENV} or built-in defaults)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. --set mask.th=0.2 (repeatable)")
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: available cores)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="evblur", description="Event-driven blur synthesis and pose adaptation toolkit.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate the synthetic corpus")
    _common(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("flow", help="per-slice flow fields for an event window")
    _common(p)
    p.add_argument("--events", required=True)
    p.add_argument("--t-ref", type=int, required=True)
    p.add_argument("--delta-tau", type=int, default=None)
    p.add_argument("--n-e", type=int, default=None)
    p.add_argument("--out", required=True, help="tensor file; one [3, H, W] flow per slice, index -n_e..n_e")

    p = sub.add_parser("synth-blur", help="synthesize a blurred frame from a sharp frame and events")
    _common(p)
    p.add_argument("--sharp", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--t-ref", type=int, required=True)
    p.add_argument("--delta-tau", type=int, default=None)
    p.add_argument("--n-e", type=int, default=None)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--hole-fill", choices=["reference"], default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="encode pose JSON into pose fields")
    _common(p)
    p.add_argument("--poses", required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", help="decode pose fields into pose JSON")
    _common(p)
    p.add_argument("--fields", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pseudo-label", help="pseudo-label targets and masks from predicted fields")
    _common(p)
    p.add_argument("--fields", required=True, help="teacher fields")
    p.add_argument("--partner-fields", help="student fields (mutual mode)")
    p.add_argument("--th", type=float, default=None)
    p.add_argument("--mode", choices=["single", "mutual"], default="single")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train-stage", help="run one adaptation stage on a corpus")
    _common(p)
    p.add_argument("--stage", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--no-mask", action="store_true", help="stage 2 ablation: masks forced to 1")
    p.add_argument("--corpus")
    p.add_argument("--out")

    p = sub.add_parser("eval", help="keypoint mAP/mAR of predicted poses against ground truth")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="write JSON results here")

    p = sub.add_parser("pipeline", help="corpus, stages 1-4 and evaluation for every configured seed")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: config seeds)")
    p.add_argument("--out", help="run root (default: config out_dir)")
    p.add_argument("--no-ablation", action="store_true", help="skip the stage-2 no-mask run")
    return ap


# ---------------------------------------------------------------------------
# helpers


def _parse_value(text: str):
    import yaml

    return yaml.safe_load(text)


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    sets = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        sets[k.strip()] = _parse_value(v)
    if args.jobs is not None:
        sets["jobs"] = args.jobs
    cfg = override(cfg, sets) if sets else cfg
    log.info("resolved config:\n%s", cfg.dump())
    return cfg


def _jobs(cfg: RunConfig) -> int:
    return cfg.jobs if cfg.jobs and cfg.jobs > 0 else (os.cpu_count() or 1)


def _sidecar(path: str | Path, cfg: RunConfig, **extra) -> None:
    Path(str(path) + ".json").write_text(json.dumps({"config": cfg.to_dict(), **extra}, indent=1, sort_keys=True))


def _flow_params(cfg: RunConfig):
    from .flow import FlowParams

    f = cfg.flow
    return FlowParams(f.block_size, f.search_radius, f.refine_steps, f.min_events)


def _decode_params(cfg: RunConfig):
    from .poses import DecodeParams

    c = cfg.pose
    return DecodeParams(c.max_centers, c.center_threshold, c.nms_oks_threshold, c.local_max_window)


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=1, sort_keys=True) if args.json else text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args, cfg):
    from .corpus import generate_corpus

    seed = cfg.seed if args.seed is None else args.seed
    cfg = override(cfg, {"seed": seed})
    root = generate_corpus(cfg.corpus, seed, args.out)
    (Path(root) / "config.yaml").write_text(cfg.dump())
    _emit(args, {"corpus": str(root), "seed": seed}, f"corpus written to {root} (seed {seed})")


def cmd_flow(args, cfg):
    from .blur import flows_from_events
    from .events import load_events, slice_events
    from .tensorio import save_tensors

    stream = load_events(args.events)
    dt = args.delta_tau or cfg.corpus.delta_tau
    n_e = cfg.corpus.n_e if args.n_e is None else args.n_e
    flows = flows_from_events(stream, args.t_ref, dt, n_e, _flow_params(cfg))
    idx = [sl.index for sl in slice_events(stream, args.t_ref, dt, n_e)]
    ordered = [f for _, f in sorted(zip(idx, flows), key=lambda t: t[0])]
    save_tensors(args.out, [f.to_tensor() for f in ordered])
    _sidecar(args.out, cfg, t_ref=args.t_ref, delta_tau=dt, n_e=n_e, slices=sorted(idx))
    valid = [float(f.valid.mean()) for f in ordered]
    _emit(args, {"out": args.out, "slices": sorted(idx), "valid_fraction": valid},
          f"wrote {len(ordered)} flow fields to {args.out}")


def cmd_synth_blur(args, cfg):
    from .blur import blur_from_events, load_png, save_png
    from .events import load_events

    sharp = load_png(args.sharp)
    stream = load_events(args.events)
    dt = args.delta_tau or cfg.corpus.delta_tau
    n_e = cfg.corpus.n_e if args.n_e is None else args.n_e
    eps = cfg.blur.epsilon if args.epsilon is None else args.epsilon
    hole = args.hole_fill or cfg.blur.hole_fill
    sample = blur_from_events(sharp, stream, args.t_ref, dt, n_e, eps, hole, _flow_params(cfg))
    save_png(sample.blur, args.out)
    _sidecar(args.out, cfg, t_ref=args.t_ref, delta_tau=dt, n_e=n_e, epsilon=eps, hole_fill=hole)
    _emit(args, {"out": args.out, "frames": sample.flows_used}, f"wrote {args.out} ({sample.flows_used} warped frames)")


def cmd_encode(args, cfg):
    from .poses import encode_targets, load_poses

    fields = encode_targets(load_poses(args.poses), (args.width, args.height), cfg.pose.sigma)
    fields.save(args.out)
    _sidecar(args.out, cfg)
    _emit(args, {"out": args.out}, f"wrote pose fields to {args.out}")


def cmd_decode(args, cfg):
    from .poses import PoseFieldSet, decode_poses, pose_nms, save_poses

    d = _decode_params(cfg)
    poses = pose_nms(decode_poses(PoseFieldSet.load(args.fields), d), d.nms_oks_threshold)
    save_poses(poses, args.out)
    _emit(args, {"out": args.out, "people": len(poses)}, f"decoded {len(poses)} people to {args.out}")


def cmd_pseudo_label(args, cfg):
    from .poses import PoseFieldSet, save_poses
    from .pseudo import MaskParams, generate_mutual_pseudo_labels, generate_pseudo_labels

    m = cfg.mask
    mutual = args.mode == "mutual"
    if mutual and not args.partner_fields:
        raise UsageError("--mode mutual needs --partner-fields")
    th = args.th if args.th is not None else (m.th_mutual if mutual else m.th)
    params = MaskParams(th, m.near_side, m.background_value, m.gate_offsets)
    fields = PoseFieldSet.load(args.fields)
    if mutual:
        pl = generate_mutual_pseudo_labels(fields, PoseFieldSet.load(args.partner_fields), _decode_params(cfg),
                                           params, sigma=cfg.pose.sigma)
    else:
        pl = generate_pseudo_labels(fields, _decode_params(cfg), params, sigma=cfg.pose.sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pl.targets.save(out / "targets.tnsr")
    pl.masks.save(out / "masks.tnsr")
    save_poses(pl.poses, out / "poses.json")
    _sidecar(out / "targets.tnsr", cfg, mode=args.mode, th=th)
    _emit(args, {"out": str(out), "people": len(pl.poses), "confidences": [float(c) for c in pl.confidences]},
          f"{len(pl.poses)} pseudo poses written to {out}")


def cmd_train_stage(args, cfg):
    from .stages import Workspace, run_stage

    ws = Workspace(cfg, args.corpus or cfg.corpus_dir, args.out or cfg.out_dir)
    name = "stage2_nomask_student" if args.no_mask else None
    if args.no_mask and args.stage != 2:
        raise UsageError("--no-mask only applies to stage 2")
    res = run_stage(args.stage, ws, masking=not args.no_mask, name=name)
    last = res.metrics[-1] if res.metrics else {}
    _emit(args, {"stage": res.stage, "checkpoints": [str(p) for p in res.checkpoints], "last": last},
          f"stage {res.stage}: {', '.join(str(p) for p in res.checkpoints)} (last mAP_val {last.get('mAP_val', float('nan')):.4f})")


def _load_frames(path: str, with_boxes: bool):
    from .metrics import EvalError, GroundTruth
    from .poses import InstanceBox, poses_from_json

    doc = json.loads(Path(path).read_text())
    if "frames" in doc:
        entries = [(str(e.get("id", e.get("index", i))), e) for i, e in enumerate(doc["frames"])]
    elif "people" in doc:
        entries = [("0", doc)]
    else:
        raise EvalError(f"{path}: expected a 'frames' list or a 'people' list")
    out, seen = [], set()
    for fid, e in entries:
        if fid in seen:
            raise EvalError(f"{path}: duplicate frame id {fid!r}")
        seen.add(fid)
        poses = poses_from_json(e)
        if with_boxes:
            items = []
            for p, raw in zip(poses, e.get("people", [])):
                if "box" in raw:
                    x, y, w, h = raw["box"]
                    items.append(GroundTruth(p, InstanceBox(h, w, x, y)))
                else:
                    items.append(GroundTruth(p, p.box()))
            poses = items
        out.append((fid, poses))
    return out


def cmd_eval(args, cfg):
    from .metrics import evaluate

    res = evaluate(_load_frames(args.pred, False), _load_frames(args.gt, True), cfg.pose.kappa)
    if args.out:
        Path(args.out).write_text(json.dumps(res.to_dict(), indent=1, sort_keys=True))
    _emit(args, res.to_dict(), res.table())


def _pipeline_one(payload):
    cfg_dict, seed, corpus_root, out_dir, ablation = payload
    from .config import from_dict
    from .stages import run_pipeline

    logging.basicConfig(level=logging.WARNING)
    return run_pipeline(from_dict(cfg_dict), seed, corpus_root, out_dir, ablation)


ROWS = ("stage1_teacher", "stage2_nomask_student", "stage2_student", "stage3_teacher", "stage4_student")


def format_table(results: list[dict]) -> str:
    lines = []
    head = f"{'seed':>4}  {'model':<22} {'sharp mAP':>9} {'blur mAP':>9} {'avg mAP':>9} {'sharp mAR':>9} {'blur mAR':>9} {'avg mAR':>9}"
    lines.append(head)
    lines.append("-" * len(head))
    for r in results:
        for name in ROWS:
            m = r["models"].get(name)
            if m is None:
                continue
            lines.append(f"{r['seed']:>4}  {name:<22} {m['sharp_mAP']:9.4f} {m['blur_mAP']:9.4f} {m['avg_mAP']:9.4f} "
                         f"{m['sharp_mAR']:9.4f} {m['blur_mAR']:9.4f} {m['avg_mAR']:9.4f}")
    return "\n".join(lines)


def ordering_summary(results: list[dict]) -> dict:
    s4 = sum(r["models"]["stage4_student"]["blur_mAP"] >= r["models"]["stage2_student"]["blur_mAP"] for r in results)
    nm = [r for r in results if "stage2_nomask_student" in r["models"]]
    mk = sum(r["models"]["stage2_student"]["blur_mAP"] >= r["models"]["stage2_nomask_student"]["blur_mAP"] for r in nm)
    return {"seeds": len(results), "stage4_ge_stage2": int(s4), "masked_ge_unmasked": int(mk),
            "ablation_seeds": len(nm)}


def cmd_pipeline(args, cfg):
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds)
    root = Path(args.out or cfg.out_dir)
    payloads = [(cfg.to_dict(), s, root / f"seed_{s}" / "corpus", root / f"seed_{s}" / "run", not args.no_ablation)
                for s in seeds]
    jobs = min(_jobs(cfg), len(seeds))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            results = list(ex.map(_pipeline_one, payloads))
    else:
        results = [_pipeline_one(p) for p in payloads]
    results.sort(key=lambda r: r["seed"])
    summary = ordering_summary(results)
    (root / "pipeline.json").write_text(json.dumps({"results": results, "ordering": summary,
                                                    "config": cfg.to_dict()}, indent=1, sort_keys=True))
    text = format_table(results) + (
        f"\nstage-4 >= stage-2 (blur mAP): {summary['stage4_ge_stage2']}/{summary['seeds']} seeds"
        f"\nmasked >= unmasked stage 2 (blur mAP): {summary['masked_ge_unmasked']}/{summary['ablation_seeds']} seeds")
    _emit(args, {"results": results, "ordering": summary}, text)


COMMANDS = {
    "simulate": cmd_simulate, "flow": cmd_flow, "synth-blur": cmd_synth_blur, "encode": cmd_encode,
    "decode": cmd_decode, "pseudo-label": cmd_pseudo_label, "train-stage": cmd_train_stage,
    "eval": cmd_eval, "pipeline": cmd_pipeline,
}


def dispatch(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("evblur: a subcommand is required (see --help)")
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError, FloatingPointError) as exc:
        mod = type(exc).__module__.replace("builtins", "evblur")
        print(f"evblur {args.command}: {mod}.{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
