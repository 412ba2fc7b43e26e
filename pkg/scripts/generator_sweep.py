"""Sweep one BenchSpec field and report Backbone / Full target accuracy per value.

Usage: python scripts/generator_sweep.py --field sigma --values 0.1,0.3,0.6 [--seeds 0]
"""

import argparse

from hctransformer.experiments import run_matrix, seed_average
from hctransformer.synthbench import BenchSpec


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--field", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--seeds", default="0")
    p.add_argument("--variants", default="backbone,full")
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    for raw in args.values.split(","):
        bench = BenchSpec(**{args.field: float(raw)})
        res = run_matrix(args.variants.split(","), seeds, bench, attribution_videos=0)
        print(args.field, raw, {k: round(v, 3) for k, v in seed_average(res, "target_accuracy").items()}, flush=True)


if __name__ == "__main__":
    main()
