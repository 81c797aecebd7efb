"""Single models vs. fused-at-test ensemble vs. MSPLD on the reference world.

    python3 scripts/reference_compare.py --out runs/reference
    python3 scripts/reference_compare.py --config configs/reference_noise.json --out runs/noise

Writes compare.csv and per-seed traces under --out and prints the per-iteration
MSPLD mAP and pseudo-label recall for every seed.
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from mspld import cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "reference.json"))
    p.add_argument("--out", default="runs/reference")
    p.add_argument("--seeds", help="comma-separated; defaults to the config's seeds")
    args = p.parse_args()

    seeds = None if args.seeds is None else [int(s) for s in args.seeds.split(",")]
    t0 = time.perf_counter()
    res = cli.cmd_compare(args.config, args.out, seeds)
    print(f"{'method':16s} {'mAP':>7s} {'std':>6s}")
    for name, row in res["table"].items():
        print(f"{name:16s} {100 * row['mean']:7.2f} {100 * row['std']:6.2f}")

    for seed in res["seeds"]:
        lines = (Path(args.out) / f"seed_{seed}" / "mspld.trace.jsonl").read_text().splitlines()
        traces = [json.loads(line) for line in lines]
        maps = " ".join(f"{100 * t['test_map']:5.1f}" for t in traces)
        rec = " ".join(f"{np.mean([m['ins_recall'] for m in t['per_model']]):.3f}" for t in traces)
        print(f"seed {seed}: mAP by iteration {maps} | instance recall {rec}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
