"""Train every ablation row on one generated benchmark and print the comparison table.

Usage: python scripts/ablation_table.py --out runs/ablation [--seed 0] [--config configs/default.json]
"""

import argparse
import sys
from pathlib import Path

from hctransformer.cli import main as cli_main


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("--seed", default="0")
    p.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "default.json"))
    args = p.parse_args()
    data = str(Path(args.out) / "data")
    common = ["--config", args.config, "--seed", args.seed]
    rc = cli_main(["generate", *common, "--out", data])
    if rc == 0:
        rc = cli_main(["ablate", *common, "--data", data, "--out", args.out])
    sys.exit(rc)


if __name__ == "__main__":
    main()
