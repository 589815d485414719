"""Empirical benefit threshold: the smallest beta/(gamma f) at which every one-shot deviation is unprofitable.

    python3 scripts/beta_threshold.py [--replicates 100] [--out results/beta_threshold]
"""

import argparse
import sys

from mediated_gossip import cli

RATIOS = "1/10,1/2,1,2,3,5,10"


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--replicates", type=int, default=100)
    ap.add_argument("--out", default="results/beta_threshold")
    args = ap.parse_args(argv)
    return cli.main(["sweep", f"beta_ratio={RATIOS}", "delta_disc=0.95", "--replicates", str(args.replicates),
                     "--out", args.out])


if __name__ == "__main__":
    sys.exit(main())
