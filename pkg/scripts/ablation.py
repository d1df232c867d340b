"""Bi-branch vs single-branch lighting fits on ten seeded synthetic scenes.

    python scripts/ablation.py [--size 32] [--steps 2000] [--json out.json]
"""
import argparse
import json

import numpy as np

from relit.lighting_correction import CorrectionConfig
from relit.synthetic import ABLATION_SEEDS, ablation


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--json", help="write per-scene rows here")
    args = ap.parse_args()

    rows = ablation(ABLATION_SEEDS, args.size, CorrectionConfig(steps=args.steps))
    print(f"{'seed':>5} {'bi PSNR':>9} {'single PSNR':>12} {'bi err':>9} {'single err':>11}")
    for r in rows:
        print(f"{r['seed']:>5} {r['psnr_bi']:9.2f} {r['psnr_single']:12.2f} {r['err_bi']:9.2e} {r['err_single']:11.2e}")
    bi = np.mean([r["psnr_bi"] for r in rows])
    single = np.mean([r["psnr_single"] for r in rows])
    print(f"mean  {bi:9.2f} {single:12.2f}   bi >= single: {bi >= single}")
    if args.json:
        with open(args.json, "w") as f:
            json.dump({"size": args.size, "steps": args.steps, "rows": rows}, f, indent=1)


if __name__ == "__main__":
    main()
