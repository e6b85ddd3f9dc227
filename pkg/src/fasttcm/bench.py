"""Online vs offline text-path inference latency, and grayscale feature-map export."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import BenchConfig, Config
from .model import FastTCM, precompute_text_path
from .synthgen import write_pgm

BENCH_HEADER = ["mode", "images", "mean_ms", "p50_ms", "p95_ms", "max_abs_diff"]
MAP_KINDS = ("I_norm", "I_tilde_norm", "P", "mask")


@dataclass
class BenchReport:
    mode: str
    images: int
    mean_latency_ms: float
    p50: float
    p95: float
    equivalence_max_abs_diff: float

    @classmethod
    def from_times(cls, mode: str, images: int, seconds: list[float], diff: float) -> "BenchReport":
        ms = np.asarray(seconds) * 1e3
        return cls(mode, images, float(ms.mean()), float(np.percentile(ms, 50)),
                   float(np.percentile(ms, 95)), diff)

    def row(self) -> list:
        return [self.mode, self.images, self.mean_latency_ms, self.p50, self.p95,
                self.equivalence_max_abs_diff]


def _online(model: FastTCM, image: np.ndarray) -> dict[str, T.Tensor]:
    return model(image[None])


def _offline(model: FastTCM, image: np.ndarray, cached: dict[str, T.Tensor]) -> dict[str, T.Tensor]:
    return model(image[None], text=cached)


def _timed(fn, *args) -> tuple[float, dict[str, T.Tensor]]:
    t0 = time.perf_counter()
    out = fn(*args)
    return time.perf_counter() - t0, out


def bench_inference(
    model: FastTCM,
    images: np.ndarray,
    bench: BenchConfig | None = None,
    tcm: bool = False,
    cached: dict[str, T.Tensor] | None = None,
) -> list[BenchReport]:
    """Time per-image inference with the text path recomputed (online) and cached (offline).

    The two modes alternate on the same image so drift in machine load hits both
    equally. Every image in ``images`` is also checked for output equivalence.
    """
    bench = bench or model.cfg.bench
    if bench.warmup < 10 or bench.iters < 100:
        raise ValueError("benchmark needs at least 10 warmup and 100 timed iterations")
    if len(images) == 0:
        raise ValueError("no images to benchmark")
    if cached is None:
        cached = {"t_out": T.Tensor._wrap(precompute_text_path(model))}
    tcm_model = _tcm_twin(model) if tcm else None

    n = len(images)
    times = {"online": [], "offline": [], "tcm": []}
    diff = 0.0
    with T.no_grad():
        for i in range(n):
            a, b = _online(model, images[i]), _offline(model, images[i], cached)
            for key in ("P", "prob"):
                diff = max(diff, float(np.abs(a[key].data - b[key].data).max()))
        for it in range(bench.warmup + max(bench.iters, n)):
            img = images[it % n]
            order = ("online", "offline") if it % 2 == 0 else ("offline", "online")
            for mode in order:
                if mode == "online":
                    dt, _ = _timed(_online, model, img)
                else:
                    dt, _ = _timed(_offline, model, img, cached)
                if it >= bench.warmup:
                    times[mode].append(dt)
            if tcm_model is not None:
                dt, _ = _timed(_online, tcm_model, img)
                if it >= bench.warmup:
                    times["tcm"].append(dt)
    reports = [
        BenchReport.from_times("online", n, times["online"], diff),
        BenchReport.from_times("offline", n, times["offline"], diff),
    ]
    if tcm_model is not None:
        # per-image cues have no cached counterpart to compare against
        reports.append(BenchReport.from_times("tcm", n, times["tcm"], float("nan")))
    return reports


def _tcm_twin(model: FastTCM) -> FastTCM:
    """Same weights, but the cue network reads each image's pooled feature."""
    twin = FastTCM(model.cfg.copy(mode="tcm"))
    twin.load_sections(model.sections())
    return twin


def write_bench_report(path: str | Path, reports: list[BenchReport]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for r in reports:
            w.writerow(r.row())
    return path


def depth_sweep(cfg: Config, images: np.ndarray, depths=(2, 4, 8),
                bench: BenchConfig | None = None) -> dict[int, list[BenchReport]]:
    """Benchmark freshly initialised models whose text encoder depth varies."""
    return {d: bench_inference(FastTCM(cfg.copy(text_depth=d)), images, bench) for d in depths}


def latency_gap(reports: list[BenchReport]) -> float:
    by_mode = {r.mode: r for r in reports}
    return by_mode["online"].mean_latency_ms - by_mode["offline"].mean_latency_ms


# ----------------------------------------------------------------------------
# map export


def to_gray(x: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes uniform 128."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.round((x - lo) / (hi - lo) * 255.0).astype(np.uint8)


def sample_maps(model: FastTCM, image: np.ndarray) -> dict[str, np.ndarray]:
    with T.no_grad():
        out = model(image[None])
    I = out["I"].data[0]
    I_tilde = out["I_tilde"].data[0] if "I_tilde" in out else np.zeros_like(I)
    return {
        "I_norm": np.linalg.norm(I, axis=-1),
        "I_tilde_norm": np.linalg.norm(I_tilde, axis=-1),
        "P": out["P"].data[0, ..., 0],
        "mask": (out["prob"].data[0, ..., 0] > 0.5).astype(np.float64),
    }


def export_maps(model: FastTCM, images: np.ndarray, indices, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    indices = [int(i) for i in indices]
    for i in indices:
        if not 0 <= i < len(images):
            raise IndexError(f"sample index {i} out of range for {len(images)} images")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i in indices:
        for kind, arr in sample_maps(model, images[i]).items():
            path = out_dir / f"{i:05d}_{kind}.pgm"
            write_pgm(path, to_gray(arr))
            written.append(path)
    return written
