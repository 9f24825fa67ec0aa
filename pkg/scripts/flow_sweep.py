"""Contrast-maximization flow accuracy on textured translation scenes.

Prints, per speed (px per slice) and block size, the fraction of valid blocks
whose velocity is within 10% relative error.

    python3 scripts/flow_sweep.py --speeds 2,3,5,10 --scenes 4 --blocks 16,32
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from acceptance_checks import flow_recovery  # noqa: E402
from evblur.flow import FlowParams  # noqa: E402


def main():
    ap = argparse.ArgumentParser(description="flow accuracy sweep")
    ap.add_argument("--speeds", default="2,3,5,10")
    ap.add_argument("--scenes", type=int, default=4)
    ap.add_argument("--blocks", default="16")
    args = ap.parse_args()
    speeds = tuple(float(s) for s in args.speeds.split(","))
    for b in (int(x) for x in args.blocks.split(",")):
        t = time.perf_counter()
        rates = flow_recovery(speeds, args.scenes, FlowParams(block_size=b))
        cells = "  ".join(f"{s:g}px {r:6.1%}" for s, r in rates.items())
        print(f"block {b:3d}: {cells}   ({time.perf_counter() - t:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
