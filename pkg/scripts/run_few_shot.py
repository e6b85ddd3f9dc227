"""Baseline vs full model at 10/25/50/100 percent of the training split.

    python3 scripts/run_few_shot.py [--out out/few_shot] [--set key=value ...]
"""

import sys

from fasttcm.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    if "--out" not in args:
        args += ["--out", "out/few_shot"]
    sys.exit(main(["few-shot", *args]))
