"""Base models per domain, then SFT and feature-level UAP rehearsal over
several domain orders.  Prints one EER table per run and a summary.

    python3 scripts/sequence_orders.py --seed 0 --out runs/orders
"""

import argparse
import logging
import warnings
from pathlib import Path

from uapcl.experiment import desk_experiment, run_sequence, train_base
from uapcl.report import compare, prior_domain_eers

ORDERS = ("1,2,3", "3,2,1", "2,3,1")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--orders", nargs="+", default=list(ORDERS), help="comma-separated domain orders")
    ap.add_argument("--out", default="runs/orders")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    warnings.simplefilter("ignore", RuntimeWarning)

    out = Path(args.out)
    data_dir = str(out / f"data_s{args.seed}")
    reports = {}
    for d in (1, 2, 3):
        cfg = desk_experiment(args.seed, "base", data_dir=data_dir)
        reports[f"base d{d}"] = train_base(cfg, d, out / f"base_d{d}")

    summary = []
    for text in args.orders:
        order = [int(x) for x in text.split(",")]
        tag = "".join(map(str, order))
        for strategy in ("sft", "uap_feature"):
            cfg = desk_experiment(args.seed, strategy, order=order, data_dir=data_dir)
            rep = run_sequence(cfg, out / f"{strategy}_{tag}")
            reports[f"{strategy} {tag}"] = rep
            prior = prior_domain_eers(rep, order)
            summary.append((strategy, tag, prior, rep.averages[-1]))
            print(f"== {strategy}, order {tag}")
            print(rep.to_table())

    print(compare(reports, title=f"seed {args.seed}"))
    print("prior-domain EER % after each later stage, and final average")
    for strategy, tag, prior, avg in summary:
        print(f"  {strategy:<12} {tag}  {' '.join(f'{p:6.2f}' for p in prior)}   avg {avg:6.2f}")


if __name__ == "__main__":
    main()
