"""Run one of the desk-scale ablation suites and print its table.

Each suite trains several variants of the same base run (40 sagittal
slices at 96x96, 120 Gaussians per slice, 60 epochs) and writes every
run's artifacts plus ``results.csv`` under ``--out``. The published
full-scale numbers appear as ``ref_*`` columns for orientation; the desk
runs are smaller, so only trends are comparable.

    python demos/ablations.py loss --out runs/ablations
    python demos/ablations.py slice_density --epochs 20
"""

import argparse
import csv
import sys
from pathlib import Path

from slicesplat import experiments

SUITES = {
    "loss": experiments.loss_suite,
    "init": experiments.init_suite,
    "slice_density": experiments.slice_density_suite,
    "gaussian_count": experiments.gaussian_count_suite,
    "density": experiments.density_suite,
    "speed": experiments.speed_suite,
}

SHOW = ("experiment", "status", "n_gaussians", "L1", "SSIM", "eval_SSIM", "opacity_std", "mean_ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("suite", choices=sorted(SUITES))
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    base = experiments.desk_base(args.seed, {"train.epochs": args.epochs})
    suite = SUITES[args.suite](str(Path(args.out) / args.suite), base)
    rows = experiments.run_ablation(suite)

    cols = [c for c in SHOW if any(r.get(c) not in (None, "") for r in rows)]
    cols += sorted({k for r in rows for k in r if k.startswith("ref_")})
    writer = csv.writer(sys.stdout)
    writer.writerow(cols)
    for r in rows:
        writer.writerow([f"{r[c]:.4f}" if isinstance(r.get(c), float) else r.get(c, "") for c in cols])
    if args.suite == "slice_density":
        ok = experiments.non_increasing([r["eval_L1"] for r in rows if r["status"] == "ok"])
        print(f"held-out L1 falls with more training slices: {ok}")


if __name__ == "__main__":
    main()
