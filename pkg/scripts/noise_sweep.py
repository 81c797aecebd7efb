"""MSPLD and baselines as distractor images are added to the reference world.

A noise ratio r adds r distractors per clean image. The clean images, the test
split and the initial labels stay fixed across ratios because every image is
generated from its own seeded stream.

    python3 scripts/noise_sweep.py --ratios 0,0.5,1 --out runs/noise_sweep.csv
"""
import argparse
import csv
from dataclasses import replace
from pathlib import Path

from mspld import cli

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "reference.json"))
    p.add_argument("--ratios", default="0,0.5,1")
    p.add_argument("--seeds", help="comma-separated; defaults to the config's seeds")
    p.add_argument("--out", default="runs/noise_sweep.csv")
    args = p.parse_args()

    cfg, seeds = cli.load_config(args.config)
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]
    clean = cfg.scene.num_images
    rows = []
    for r in (float(x) for x in args.ratios.split(",")):
        extra = round(clean * r)
        scene = replace(cfg.scene, num_images=clean + extra, distractor_fraction=extra / (clean + extra))
        summary = cli.summarize(cli.compare_rows(replace(cfg, scene=scene), seeds))
        table = {name: mean for name, mean, _ in summary}
        rows.append({"ratio": r, **{k: f"{v:.6f}" for k, v in table.items()}})
        print(f"noise {r:4.2f}: mspld {100 * table['mspld']:.2f}  ensemble {100 * table['spl_ensemble']:.2f}  "
              f"best single {100 * table['best_single']:.2f}", flush=True)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
