"""Backbone vs +HmEnc vs Full on the default benchmark, averaged over seeds.

Usage: python scripts/spurious_correlation.py [--seeds 0,1,2] [--variants backbone,hm,full]
"""

import argparse
import json

from hctransformer.experiments import run_matrix, seed_average


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--variants", default="backbone,hm,full")
    p.add_argument("--json", help="write per-run results here")
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_matrix(args.variants.split(","), seeds)
    for r in results:
        print(f"seed {r.seed} {r.variant:>16}: src {r.source_accuracy:.3f} tgt {r.target_accuracy:.3f} "
              f"HR {r.human_ratio:.1f} DBI {r.davies_bouldin:.2f} ({r.seconds:.0f}s)")
    for field in ("source_accuracy", "target_accuracy", "human_ratio", "davies_bouldin"):
        print(field, {k: round(v, 3) for k, v in seed_average(results, field).items()})
    if args.json:
        with open(args.json, "w") as fh:
            json.dump([r.__dict__ for r in results], fh, indent=2)


if __name__ == "__main__":
    main()
