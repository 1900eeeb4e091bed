"""Latency harness for single depthwise layers and FLOP/parameter sweeps.

Every variant runs on the same direct tap-loop kernel, so latency differences
come from the number of taps visited, not from different executors:

* ``dense``: an M x M kernel, all taps.
* ``sparse_masked``: an M x M kernel with a fraction ``sparsity`` of zeros,
  still visiting all taps (masked-dense execution).
* ``sparse_decomposed``: M x N plus N x M kernels at the given sparsity,
  visiting only nonzero taps.
* ``sparse_decomposed_masked``: the same pair, visiting all taps.

Before timing, each variant's output is checked against the banded-matmul
convolution path on the same shapes.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .conv import conv2d_forward, depthwise_spec
from .errors import ConfigError, NumericError
from .kernels import dw_direct, tap_lists
from .tensor import RngStream, rel_err

VARIANTS = ("dense", "sparse_masked", "sparse_decomposed", "sparse_decomposed_masked")
CSV_FIELDS = ("variant", "M", "N", "C", "R", "median_s", "speedup_vs_dense")
GATE_TOL = 1e-4


@dataclass
class BenchRecord:
    variant: str
    M: int
    N: int
    C: int
    R: int
    batch: int
    sparsity: float
    reps: int
    warmup: int
    latency_median: float
    latency_p10: float
    latency_p90: float
    workers: int = 1
    taps: int = 0
    times: List[float] = field(default_factory=list)

    def to_dict(self, with_times=False):
        d = asdict(self)
        if not with_times:
            d.pop("times")
        return d


def random_mask(shape, sparsity, stream: RngStream):
    """Exactly round((1 - s) * size) active entries at uniformly drawn positions."""
    size = int(np.prod(shape))
    keep = int(round((1.0 - sparsity) * size))
    m = np.zeros(size, dtype=np.float32)
    m[stream.generator.choice(size, size=keep, replace=False)] = 1.0
    return m.reshape(shape)


def _layer(variant, C, M, N, sparsity, stream):
    """[(weight, spec)] for the variant and whether zero taps are skipped."""
    g = stream.derive("weights")
    if variant in ("dense", "sparse_masked"):
        w = g.generator.standard_normal((C, 1, M, M)).astype(np.float32)
        if variant == "sparse_masked":
            w *= random_mask(w.shape, sparsity, stream.derive("mask"))
        return [(w, depthwise_spec(C, M, M))], False
    pair = []
    for name, kh, kw in (("h", M, N), ("w", N, M)):
        w = g.generator.standard_normal((C, 1, kh, kw)).astype(np.float32)
        w *= random_mask(w.shape, sparsity, stream.derive(f"mask.{name}"))
        pair.append((w, depthwise_spec(C, kh, kw)))
    return pair, variant == "sparse_decomposed"


def _run(x, layer, taps):
    out = None
    for (w, spec), t in zip(layer, taps):
        y = dw_direct(x, w, spec, taps=t)
        out = y if out is None else out + y
    return out


def equivalence_gate(x, layer, taps):
    """Compare the timed kernel against the banded conv path on one image."""
    xs = x[:1]
    got = _run(xs, layer, taps)
    want = sum(conv2d_forward(xs.astype(np.float64), w.astype(np.float64), None, spec) for w, spec in layer)
    err = rel_err(got, want)
    if not err < GATE_TOL:
        raise NumericError(f"equivalence gate failed: rel err {err:.3e}")
    return err


def bench_variant(variant, C, R, M, N=5, sparsity=0.4, reps=5, warmup=1, stream: RngStream = None,
                  batch=8, clock=time.perf_counter) -> BenchRecord:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; choose from {VARIANTS}", "variant")
    if reps < 3:
        raise ConfigError("need at least 3 timed repetitions", "reps")
    if warmup < 1:
        raise ConfigError("need at least 1 warmup iteration", "warmup")
    if not 0.0 <= sparsity < 1.0:
        raise ConfigError("must be in [0, 1)", "sparsity")
    stream = stream or RngStream(0)
    layer, skip = _layer(variant, C, M, N, sparsity, stream)
    x = stream.derive("input").generator.standard_normal((batch, C, R, R)).astype(np.float32)
    taps = [tap_lists(w, spec.dilation, skip_zeros=skip) for w, spec in layer]
    equivalence_gate(x, layer, taps)
    for _ in range(warmup):
        _run(x, layer, taps)
    times = []
    for _ in range(reps):
        t0 = clock()
        _run(x, layer, taps)
        times.append(clock() - t0)
    p10, med, p90 = np.percentile(times, [10, 50, 90])
    return BenchRecord(variant, M, N if variant.startswith("sparse_decomposed") else M, C, R, batch, sparsity,
                       reps, warmup, float(med), float(p10), float(p90), 1,
                       int(sum(t[0][-1] for t in taps)), [float(t) for t in times])


def _dense_key(r):
    return (r.M, r.C, r.R, r.batch)


def speedup_rows(records):
    if not records:
        raise ValueError("no records to report")
    dense = {_dense_key(r): r.latency_median for r in records if r.variant == "dense"}
    rows = []
    for r in records:
        base = dense.get(_dense_key(r))
        rows.append({"variant": r.variant, "M": r.M, "N": r.N, "C": r.C, "R": r.R, "median_s": r.latency_median,
                     "speedup_vs_dense": base / r.latency_median if base else float("nan")})
    return rows


def speedup_report(records) -> str:
    """CSV with one row per record; speedups are relative to the dense record of the same M, C, R."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for row in speedup_rows(records):
        w.writerow([row["variant"], row["M"], row["N"], row["C"], row["R"], f"{row['median_s']:.6e}",
                    f"{row['speedup_vs_dense']:.4f}"])
    return buf.getvalue()


def speedup_json(records) -> str:
    return json.dumps(speedup_rows(records), indent=2)


def latency_sweep(resolutions=(16, 32, 64, 128), M=51, N=5, C=64, batch=8, sparsity=0.4, reps=5, warmup=1,
                  seed=0, variants=("dense", "sparse_masked", "sparse_decomposed")):
    """Records for every (resolution, variant) pair, the shape of the latency table."""
    root = RngStream(seed)
    out = []
    for R in resolutions:
        for v in variants:
            out.append(bench_variant(v, C, R, M, N, sparsity, reps, warmup, root.derive(f"{v}.{R}"), batch))
    return out
