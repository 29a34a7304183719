"""Trajectory-MAE deviation under Gaussian input noise, 1-cycle vs 3-cycle inputs."""

import argparse

from knotcast.data import SynthConfig, synth_fleet
from knotcast.evaluation import PipelineConfig, format_table, robustness_study, run_cv, write_box_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--draws", type=int, default=100)
    ap.add_argument("--sigmas", default="0.001,0.003,0.01")
    ap.add_argument("--box-prefix", default=None, help="write <prefix>_<cycles>.csv box-plot files")
    args = ap.parse_args()

    sigmas = [float(s) for s in args.sigmas.split(",")]
    fleet = synth_fleet(SynthConfig(), seed=args.seed)
    rows = []
    for cycles in (1, 3):
        cfg = PipelineConfig(input_cycles=cycles, seed=args.seed)
        study = robustness_study(fleet, run_cv(fleet, cfg), cfg, sigmas, args.draws, seed=args.seed)
        rows += [{"input_cycles": cycles, "sigma": s, "q1": v["q1"], "median": v["median"], "q3": v["q3"]} for s, v in study.items()]
        if args.box_prefix:
            write_box_csv(study, f"{args.box_prefix}_{cycles}.csv")
    print(format_table(rows))


if __name__ == "__main__":
    main()
