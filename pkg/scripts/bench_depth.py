"""Online vs offline latency for text encoders of depth 2, 4 and 8.

Prints one line per depth and writes ``bench_depth.csv`` to the output directory.

    python3 scripts/bench_depth.py [out_dir] [n_images]
"""

import csv
import sys
from pathlib import Path

from fasttcm.bench import BENCH_HEADER, depth_sweep, latency_gap
from fasttcm.config import Config
from fasttcm.synthgen import build_dataset


def run(out_dir: str = "out/bench", n_images: int = 10) -> dict[int, float]:
    cfg = Config().copy(n_test=n_images).validate()
    images = build_dataset(cfg, "test").images
    sweep = depth_sweep(cfg, images)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    gaps = {}
    with open(out / "bench_depth.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["text_depth", *BENCH_HEADER])
        for depth, reports in sweep.items():
            for r in reports:
                w.writerow([depth, *r.row()])
            gaps[depth] = latency_gap(reports)
            by = {r.mode: r for r in reports}
            print(f"depth {depth}: online {by['online'].mean_latency_ms:.3f} ms  "
                  f"offline {by['offline'].mean_latency_ms:.3f} ms  gap {gaps[depth]:.3f} ms")
    return gaps


if __name__ == "__main__":
    run(*(sys.argv[1:2] or ["out/bench"]), *(int(a) for a in sys.argv[2:3]))
