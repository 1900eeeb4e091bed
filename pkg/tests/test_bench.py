import itertools
import json

import numpy as np
import pytest

from slak.bench import (BenchRecord, bench_variant, equivalence_gate, latency_sweep, random_mask, speedup_json,
                        speedup_report)
from slak.conv import depthwise_spec
from slak.errors import ConfigError, NumericError
from slak.kernels import tap_lists
from slak.tensor import RngStream


def fake_clock(step=0.001):
    ticks = itertools.count()
    return lambda: next(ticks) * step


def _rec(variant, median, M=51, N=51):
    return BenchRecord(variant, M, N, 8, 16, 2, 0.4, 3, 1, median, median, median)


class TestBenchVariant:
    @pytest.mark.parametrize("reps,warmup", [(0, 1), (2, 1), (3, 0)])
    def test_invalid(self, reps, warmup):
        with pytest.raises(ConfigError):
            bench_variant("dense", 4, 8, 5, reps=reps, warmup=warmup)

    def test_unknown_variant(self):
        with pytest.raises(ConfigError):
            bench_variant("dense_fast", 4, 8, 5)

    def test_record_statistics(self):
        r = bench_variant("dense", 4, 8, 5, reps=4, batch=1, clock=fake_clock())
        assert r.times == pytest.approx([0.001] * 4)
        assert r.latency_p10 <= r.latency_median <= r.latency_p90 and r.latency_median > 0

    @pytest.mark.parametrize("variant", ["dense", "sparse_masked", "sparse_decomposed", "sparse_decomposed_masked"])
    def test_runs_and_counts_taps(self, variant):
        r = bench_variant(variant, 4, 12, 7, 3, sparsity=0.5, reps=3, batch=1)
        full = 4 * 49 if variant.startswith("dense") or variant == "sparse_masked" else 4 * 42
        if variant == "sparse_decomposed":
            assert r.taps == 2 * round(0.5 * 4 * 21)
        else:
            assert r.taps == full
        assert all(t > 0 for t in r.times)

    def test_same_seed_same_layer(self):
        a = bench_variant("sparse_decomposed", 2, 8, 7, 3, reps=3, stream=RngStream(5), batch=1)
        b = bench_variant("sparse_decomposed", 2, 8, 7, 3, reps=3, stream=RngStream(5), batch=1)
        assert a.taps == b.taps

    def test_gate_rejects_wrong_kernel(self, gen):
        w = gen.standard_normal((2, 1, 3, 3)).astype(np.float32)
        spec = depthwise_spec(2, 3)
        bad = tap_lists(w * 2, 1)
        with pytest.raises(NumericError):
            equivalence_gate(gen.standard_normal((1, 2, 6, 6)).astype(np.float32), [(w, spec)], [bad])

    def test_random_mask_exact_count(self):
        m = random_mask((3, 1, 7, 5), 0.4, RngStream(0))
        assert m.sum() == round(0.6 * 105)


class TestReport:
    def test_single_dense(self):
        lines = speedup_report([_rec("dense", 0.5)]).splitlines()
        assert lines[0] == "variant,M,N,C,R,median_s,speedup_vs_dense"
        assert lines[1].endswith(",1.0000")

    def test_ratio_from_medians(self):
        rows = json.loads(speedup_json([_rec("dense", 0.6), _rec("sparse_decomposed", 0.2, N=5)]))
        assert rows[1]["speedup_vs_dense"] == pytest.approx(3.0) and rows[1]["N"] == 5

    def test_empty(self):
        with pytest.raises(ValueError):
            speedup_report([])

    def test_sweep_shape(self):
        recs = latency_sweep(resolutions=(8, 12, 16, 20), M=7, N=3, C=2, batch=1, reps=3)
        assert len(recs) == 12
        assert {(r.R, r.variant) for r in recs} == {(R, v) for R in (8, 12, 16, 20)
                                                    for v in ("dense", "sparse_masked", "sparse_decomposed")}
        assert len(speedup_report(recs).splitlines()) == 13
