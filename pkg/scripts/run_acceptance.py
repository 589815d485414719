"""Run the acceptance criteria outside pytest and write one JSON file per criterion.

    python3 scripts/run_acceptance.py --out acceptance_results/manual
    python3 scripts/run_acceptance.py --only 1 2 3

Exit status is 0 when every selected criterion passes.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

import acceptance_checks as A  # noqa: E402


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="acceptance_results/manual", help="directory for criterion_NN.json files")
    ap.add_argument("--seed", type=lambda s: int(s, 0), default=None,
                    help=f"master seed (default ${A.SEED_ENV} or {A.DEFAULT_SEED})")
    ap.add_argument("--only", type=int, nargs="+", choices=sorted(A.CHECKS), default=sorted(A.CHECKS))
    args = ap.parse_args(argv)
    seed = A.acceptance_seed() if args.seed is None else args.seed
    outcomes = A.run_all(seed, args.out, tuple(args.only))
    for o in outcomes:
        print(o.line(), flush=True)
    return 0 if all(o.ok for o in outcomes) else 1


if __name__ == "__main__":
    sys.exit(main())
