import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fasttcm.bench import (
    BENCH_HEADER,
    MAP_KINDS,
    BenchReport,
    bench_inference,
    export_maps,
    latency_gap,
    sample_maps,
    to_gray,
    write_bench_report,
)
from fasttcm.config import BenchConfig
from fasttcm.synthgen import read_pgm


def test_to_gray_constant_map_is_128():
    assert (to_gray(np.full((4, 5), 3.7)) == 128).all()


def test_to_gray_endpoints():
    g = to_gray(np.array([[-2.0, 0.0, 2.0]]))
    assert g.tolist() == [[0, 128, 255]]


@given(arrays(np.float64, (3, 4), elements=st.floats(-1e3, 1e3)))
def test_to_gray_inverse_within_one_level(x):
    g = to_gray(x).astype(np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return
    back = lo + g / 255.0 * (hi - lo)
    assert np.abs(back - x).max() <= (hi - lo) / 255.0 * 0.5 + 1e-9


def test_bench_rejects_short_runs(model, images):
    with pytest.raises(ValueError):
        bench_inference(model, images, BenchConfig(warmup=5, iters=100))
    with pytest.raises(ValueError):
        bench_inference(model, images, BenchConfig(warmup=10, iters=50))


def test_bench_online_offline_equivalent(model, images):
    reports = bench_inference(model, images, BenchConfig())
    assert [r.mode for r in reports] == ["online", "offline"]
    for r in reports:
        assert r.images == len(images)
        assert r.equivalence_max_abs_diff <= 1e-12
        assert 0 < r.p50 <= r.p95
        assert r.mean_latency_ms > 0


def test_bench_tcm_mode_adds_row(model, images):
    reports = bench_inference(model, images[:1], BenchConfig(), tcm=True)
    assert reports[-1].mode == "tcm" and math.isnan(reports[-1].equivalence_max_abs_diff)


def test_report_csv(tmp_path):
    reps = [BenchReport.from_times("online", 2, [0.002, 0.003], 0.0),
            BenchReport.from_times("offline", 2, [0.001, 0.001], 0.0)]
    path = write_bench_report(tmp_path / "b.csv", reps)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == BENCH_HEADER and len(rows) == 3
    assert float(rows[1][2]) == pytest.approx(2.5)
    assert latency_gap(reps) == pytest.approx(1.5)


def test_sample_maps_shapes(model, images, cfg):
    maps = sample_maps(model, images[0])
    hw = (cfg.encoder.H // cfg.encoder.s, cfg.encoder.W // cfg.encoder.s)
    assert set(maps) == set(MAP_KINDS)
    assert maps["I_norm"].shape == maps["I_tilde_norm"].shape == maps["P"].shape == hw
    assert maps["mask"].shape == (cfg.encoder.H, cfg.encoder.W)
    assert set(np.unique(maps["mask"])) <= {0.0, 1.0}


def test_export_writes_four_maps_per_index(model, images, tmp_path):
    paths = export_maps(model, images, [0, 2], tmp_path)
    assert len(paths) == 4 * 2
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == sorted(f"{i:05d}_{k}.pgm" for i in (0, 2) for k in MAP_KINDS)


def test_exported_P_inverts_within_one_level(model, images, tmp_path):
    export_maps(model, images, [1], tmp_path)
    P = sample_maps(model, images[1])["P"]
    g = read_pgm(tmp_path / "00001_P.pgm")[..., 0].astype(np.float64)
    back = P.min() + g / 255.0 * (P.max() - P.min())
    assert np.abs(back - P).max() <= (P.max() - P.min()) / 255.0


def test_export_rejects_bad_index(model, images, tmp_path):
    with pytest.raises(IndexError):
        export_maps(model, images, [len(images)], tmp_path)
    assert not any(tmp_path.iterdir())
