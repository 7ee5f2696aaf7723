#!/usr/bin/env python3
"""Trade-off curve between attack strength and box realism.

Generates a toy corpus, runs min+max attacks across a lambda grid, and
prints the (lambda, IoU-delta, mean log-pdf) table; the same data lands in
sweep.csv for external plotting.
"""

import argparse
import csv
from pathlib import Path

from breps.attack import AttackConfig, sweep_lambda
from breps.data import make_toy_corpus
from breps.segmodel import ToyModel


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=30)
    ap.add_argument("--size", type=int, default=48)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--lambdas", default="0,0.01,0.05,0.1,0.3,0.5,1.0")
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()

    corpus = make_toy_corpus(args.n, args.size, args.seed)
    model = ToyModel(corpus)
    lambdas = [float(tok) for tok in args.lambdas.split(",")]
    rows = sweep_lambda(model, corpus, lambdas, AttackConfig(seed=args.seed))

    print(f"{'lambda':>8} {'iou_delta':>10} {'log_pdf':>9}")
    for r in rows:
        print(f"{r.lam:>8g} {r.iou_delta:>10.4f} {r.log_pdf:>9.3f}")

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "iou_delta", "log_pdf"])
        writer.writerows([(r.lam, r.iou_delta, r.log_pdf) for r in rows])
    print(f"\nwrote {Path(args.out).resolve()}")


if __name__ == "__main__":
    main()
