"""Interpolation error of uniform vs Bayesian-optimised knot levels for K = 2..4."""

import argparse
import json

from knotcast.bayesopt import objective, optimize_knots
from knotcast.data import SynthConfig, synth_fleet
from knotcast.evaluation import format_table, stratified_folds
from knotcast.knots import uniform_levels


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--budget", type=int, default=60)
    ap.add_argument("--out", default=None, help="optional JSON output")
    args = ap.parse_args()

    fleet = synth_fleet(SynthConfig(), seed=args.seed)
    train, test = stratified_folds(fleet, 5, args.seed).split(fleet, 0)
    tr, te = [s for s, _ in train], [s for s, _ in test]
    rows = []
    for k in (2, 3, 4):
        uni = uniform_levels(k)
        res = optimize_knots(tr, k, args.budget, seed=args.seed)
        rows.append({
            "K": k,
            "uniform": " ".join(f"{v:g}" for v in uni.soh_levels),
            "d_uniform": objective(uni, te),
            "optimized": " ".join(f"{v:.2f}" for v in res.best_levels.soh_levels),
            "d_optimized": objective(res.best_levels, te),
        })
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
