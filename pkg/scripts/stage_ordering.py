"""Run the four-stage protocol (plus the no-mask stage-2 ablation) for several seeds
and print the sharp/blur/average table with the ordering summary.

    python3 scripts/stage_ordering.py --seeds 0,1,2 --out runs/ordering
"""
import argparse
import json
import time
from pathlib import Path

from evblur.cli import format_table, ordering_summary
from evblur.config import load_config
from evblur.stages import run_pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--out", default="runs/ordering")
    ap.add_argument("--config")
    args = ap.parse_args()
    cfg = load_config(args.config)
    root = Path(args.out)
    t = time.perf_counter()
    results = []
    for s in (int(x) for x in args.seeds.split(",")):
        results.append(run_pipeline(cfg, s, root / f"seed_{s}" / "corpus", root / f"seed_{s}" / "run"))
        print(f"seed {s} done after {time.perf_counter() - t:.0f}s", flush=True)
    summary = ordering_summary(results)
    print(format_table(results))
    print(json.dumps(summary))
    print(f"total {time.perf_counter() - t:.0f}s")


if __name__ == "__main__":
    main()
