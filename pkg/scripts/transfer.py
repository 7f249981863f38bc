"""Cross-model transfer grid between the two fixture checkpoints.

Each fixture attacks the same corpus (qava loss, RSQ_10, PGD), then every
adversarial set is scored on both models.

    python3 scripts/transfer.py [--momentum 0.9] [--di 0.5]
"""
import argparse
import sys
from pathlib import Path

from qava import cli

ROOT = Path(__file__).resolve().parents[1]
FIXTURES = [str(ROOT / "fixtures" / name) for name in ("toy-a", "toy-b")]


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--momentum", type=float, default=0.0)
    ap.add_argument("--di", type=float, default=0.0)
    args = ap.parse_args()
    base = "transfer"
    steps = [["dataset", "--images", "32", "--questions", "50", "--seed", "5", "--prefix", "eval",
              "--out", f"{base}/corpus"]]
    advs = []
    for ckpt in FIXTURES:
        out = f"{base}/attack-{Path(ckpt).name}"
        advs.append(out)
        steps.append(["attack", "--checkpoint", ckpt, "--corpus", f"{base}/corpus", "--repeats", "1",
                      "--momentum", str(args.momentum), "--di", str(args.di), "--out", out])
    steps.append(["transfer", "--checkpoints", *FIXTURES, "--adv", *advs,
                  "--corpus", f"{base}/corpus", "--out", f"{base}/grid"])
    for argv in steps:
        rc = cli.main(argv)
        if rc:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(main())
