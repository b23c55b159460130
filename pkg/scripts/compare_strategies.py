"""SFT, feature-level and waveform-level UAP rehearsal, and joint training
on the default three-domain stream, over several seeds.

Prints per-seed prior-domain EER, final averages, UAP convergence and the
embedding centroid metric, then means over seeds.

    python3 scripts/compare_strategies.py --seeds 0 1 2 3 4 --out runs/compare
"""

import argparse
import csv
import logging
import warnings
from pathlib import Path

import numpy as np

from uapcl.experiment import desk_experiment, joint_train, run_sequence
from uapcl.report import prior_domain_eers

STRATEGIES = ("sft", "uap_feature", "uap_waveform")
ORDER = [1, 2, 3]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", default="runs/compare")
    ap.add_argument("--csv", help="also write the per-seed rows here")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    warnings.simplefilter("ignore", RuntimeWarning)

    out = Path(args.out)
    rows = []
    for seed in args.seeds:
        data_dir = str(out / f"data_s{seed}")
        for strategy in STRATEGIES + ("joint",):
            cfg = desk_experiment(seed, strategy, data_dir=data_dir)
            run = out / f"{strategy}_s{seed}"
            if strategy == "joint":
                rep = joint_train(cfg, run)
                prior = [float("nan")] * (len(ORDER) - 1)
            else:
                rep = run_sequence(cfg, run)
                prior = prior_domain_eers(rep, ORDER)
            fooling = [round(u["fooling_rate"], 2) for u in rep.uap]
            centroid = rep.embedding["normalized"] if rep.embedding else float("nan")
            rows.append({"seed": seed, "strategy": strategy, "prior_mean": float(np.mean(prior)),
                         "final_avg": rep.averages[-1], "centroid": centroid, "fooling": fooling})

    print(f"{'seed':>4}  {'strategy':<13}{'prior EER':>10}{'final avg':>11}{'centroid':>10}  fooling")
    for r in rows:
        print(f"{r['seed']:>4}  {r['strategy']:<13}{r['prior_mean']:>10.2f}{r['final_avg']:>11.2f}"
              f"{r['centroid']:>10.3f}  {r['fooling']}")
    print("\nmean over seeds")
    for strategy in STRATEGIES + ("joint",):
        sel = [r for r in rows if r["strategy"] == strategy]
        print(f"  {strategy:<13}{np.mean([r['prior_mean'] for r in sel]):>10.2f}"
              f"{np.mean([r['final_avg'] for r in sel]):>11.2f}{np.mean([r['centroid'] for r in sel]):>10.3f}")

    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    main()
