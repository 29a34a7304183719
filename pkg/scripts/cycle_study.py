"""Held-out accuracy as a function of how many early cycles feed the network."""

import argparse

from knotcast.data import SynthConfig, synth_fleet
from knotcast.evaluation import PipelineConfig, format_table, input_cycle_study


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--counts", default="1,3,10,50")
    args = ap.parse_args()

    counts = tuple(int(c) for c in args.counts.split(","))
    fleet = synth_fleet(SynthConfig(recorded_cycles=max(counts)), seed=args.seed)
    print(format_table(input_cycle_study(fleet, PipelineConfig(seed=args.seed), counts)))


if __name__ == "__main__":
    main()
