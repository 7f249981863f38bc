"""Train the two fixture checkpoints used by the test suite.

Both share the rendered training corpus (seed 100, 2000 images x 24
questions) and differ only in the training seed. Expect about half an
hour per checkpoint on one CPU core.

    python3 scripts/make_fixtures.py [--only toy-a]
"""
import argparse
import sys
from pathlib import Path

from qava import cli

ROOT = Path(__file__).resolve().parents[1]
RECIPES = {"toy-a": 0, "toy-b": 1}


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--only", choices=sorted(RECIPES))
    args = ap.parse_args()
    for name, seed in RECIPES.items():
        if args.only and name != args.only:
            continue
        out = ROOT / "fixtures" / name
        rc = cli.main(["-v", "train", "--seed", str(seed), "--name", name, "--out", str(out)])
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
