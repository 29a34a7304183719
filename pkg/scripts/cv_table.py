"""Five-fold CV of the knot network for K = 2..4 (uniform levels)."""

import argparse
import json
import time

from knotcast.data import SynthConfig, synth_fleet
from knotcast.evaluation import PipelineConfig, format_table, run_cv

COLS = ("knot_mae", "knot_mape", "traj_mae", "traj_mape", "eol_in_ci", "ci_width_eol")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cells", type=int, default=169)
    ap.add_argument("--input-cycles", type=int, default=1)
    ap.add_argument("--knot-mode", default="uniform", choices=["uniform", "optimized"])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    fleet = synth_fleet(SynthConfig(n_cells=args.cells), seed=args.seed)
    rows = []
    for k in (2, 3, 4):
        t = time.perf_counter()
        rep = run_cv(fleet, PipelineConfig(k=k, knot_mode=args.knot_mode, input_cycles=args.input_cycles, seed=args.seed))
        rows.append({"K": k, **{c: rep.aggregate.get(c) for c in COLS}, "seconds": time.perf_counter() - t})
    print(format_table(rows))
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rows, f, indent=2)


if __name__ == "__main__":
    main()
