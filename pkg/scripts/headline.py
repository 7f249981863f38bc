"""Clean / noise / attack table on the main fixture.

Attacks every image of a 32x50 evaluation corpus with each surrogate
strategy and both loss locations, then writes one eval directory per
condition and a combined report under $QAVA_RUN_DIR/headline.

    python3 scripts/headline.py [--repeats 3] [--jobs 1]
"""
import argparse
import sys
from pathlib import Path

from qava import cli

ROOT = Path(__file__).resolve().parents[1]
CHECKPOINT = str(ROOT / "fixtures" / "toy-a")
STRATEGIES = ("wtq", "rsq", "rsq-t", "vqg")
LOSSES = ("qava", "llm")
# with the evaluation texts removed, some images keep only four question types
N_QUESTIONS = {"wtq": 10, "rsq": 10, "rsq-t": 4, "vqg": 10}


def run(argv: list[str]) -> None:
    rc = cli.main(argv)
    if rc:
        sys.exit(rc)


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()
    base = "headline"
    run(["dataset", "--images", "32", "--questions", "50", "--seed", "5", "--prefix", "eval",
         "--out", f"{base}/corpus"])
    corpus = f"{base}/corpus"
    run(["eval", "--checkpoint", CHECKPOINT, "--corpus", corpus, "--noise", "--eps", "8",
         "--repeats", str(args.repeats), "--out", f"{base}/eval-noise"])
    for loss in LOSSES:
        for strategy in STRATEGIES:
            tag = f"{loss}-{strategy}"
            run(["attack", "--checkpoint", CHECKPOINT, "--corpus", corpus, "--loss", loss,
                 "--strategy", strategy, "--n-questions", str(N_QUESTIONS[strategy]), "--repeats", str(args.repeats), "--jobs", str(args.jobs),
                 "--out", f"{base}/attack-{tag}"])
            run(["eval", "--checkpoint", CHECKPOINT, "--corpus", corpus,
                 "--adv", f"{base}/attack-{tag}", "--out", f"{base}/eval-{tag}"])
    run(["report", base])
    return 0


if __name__ == "__main__":
    sys.exit(main())
