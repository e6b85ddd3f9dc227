"""Component ablation on the desk preset: every row, three seeds, test split.

    python3 scripts/run_ablation.py [--out out/ablation] [--set key=value ...]
"""

import sys

from fasttcm.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    if "--out" not in args:
        args += ["--out", "out/ablation"]
    sys.exit(main(["ablate", *args]))
