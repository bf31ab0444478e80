#!/usr/bin/env python3
"""End-to-end synthetic experiment: synth -> prepare -> compare.

Builds a deterministic corpus, runs the full dataset protocol, trains all
three models over five trials, and leaves metrics.csv / summary.csv /
summary.svg / baseline.csv in the output directory. Sizes default to a
desk-scale run that finishes in tens of minutes on one core; shrink
--epochs or --records for a quick look.
"""

import argparse
import sys
from pathlib import Path

from icegraph import cli


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--records", type=int, default=200)
    parser.add_argument("--columns", type=int, default=16)
    parser.add_argument("--layers", type=int, default=16)
    parser.add_argument("--epochs", type=int, default=500)
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--out", default="runs/synthetic-experiment")
    args = parser.parse_args()

    base = Path(args.out)
    corpus = base / "corpus"
    prep = base / "prepared"
    reports = base / "reports"

    steps = [
        [
            "synth", "--records", str(args.records), "--layers", str(args.layers),
            "--columns", str(args.columns), "--seed", str(args.seed),
            "--out", str(corpus), "--force",
        ],
        [
            "prepare", "--corpus", str(corpus / "manifest.json"),
            "--seed", str(args.seed), "--out", str(prep),
        ],
        [
            "compare", "--data", str(prep), "--epochs", str(args.epochs),
            "--seed", str(args.seed), "--workers", str(args.workers),
            "--out", str(reports),
        ],
    ]
    for argv in steps:
        code = cli.main(argv)
        if code != 0:
            return code
    print(f"done; see {reports}/summary.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
