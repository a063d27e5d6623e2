"""Microbenchmarks: per-op scaling in N and M, and per-epoch training overhead.

Timings exclude data preparation.  Every measurement warms up first and
reports the median, which is less sensitive to scheduler noise than the mean.
"""
from __future__ import annotations

import contextlib
import csv
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import freqconv as fc
from . import spatial

BENCH_HEADER = ["op", "N", "M", "C", "B", "median_ns", "iterations"]
CONV_OPS = ("spatial", "freq")


@contextlib.contextmanager
def pinned(threads=1):
    """Limit BLAS pools and FFT workers to ``threads`` for the duration."""
    old = os.environ.get("NIFF_THREADS")
    os.environ["NIFF_THREADS"] = str(threads)
    try:
        with threadpool_limits(limits=threads):
            yield
    finally:
        if old is None:
            os.environ.pop("NIFF_THREADS", None)
        else:
            os.environ["NIFF_THREADS"] = old


def time_call(fn, iterations=20, warmup=5):
    for _ in range(warmup):
        fn()
    ts = np.empty(iterations)
    for i in range(iterations):
        t0 = time.perf_counter_ns()
        fn()
        ts[i] = time.perf_counter_ns() - t0
    return float(np.median(ts))


def _conv_case(op, n, m, c, b, rng, path="complex"):
    x = rng.standard_normal((b, c, n, n)).astype(np.float32)
    k = (rng.standard_normal((c, c, m, m)) / (m * np.sqrt(c))).astype(np.float32)
    if op == "spatial":
        return lambda: spatial.conv2d(x, k, 1)
    if op == "freq":
        # spectrum of the same M x M kernel, flipped (the spatial op correlates)
        # and zero padded to N x N; built once
        pad = np.zeros((c, c, n, n), np.float32)
        pad[..., :m, :m] = k[..., ::-1, ::-1]
        pad = np.roll(pad, (-(m // 2), -(m // 2)), axis=(-2, -1))
        bank = np.fft.fftshift(np.fft.fft2(pad), axes=(-2, -1)).astype(np.complex64)
        return lambda: fc.full_forward(x, bank, path=path)
    raise ValueError(f"unknown op {op!r}; expected one of {CONV_OPS}")


@dataclass
class BenchReport:
    rows: list
    slopes: dict = field(default_factory=dict)
    crossover: dict = field(default_factory=dict)

    def select(self, op, **fixed):
        sel = [r for r in self.rows if r["op"] == op and all(r[k] == v for k, v in fixed.items())]
        return sel

    def write(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(BENCH_HEADER)
            for r in self.rows:
                w.writerow([r[k] for k in BENCH_HEADER])


def loglog_slope(xs, ts):
    return float(np.polyfit(np.log(xs), np.log(ts), 1)[0])


def sweep_conv(ops=CONV_OPS, n_list=(16, 24, 32, 48, 64), m_list=(3,), c=8, b=4, iterations=20,
               warmup=5, seed=0, threads=1, path="complex"):
    """Time each op over the (N, M) grid; cases with M > N are skipped."""
    rng = np.random.default_rng(seed)
    rows = []
    with pinned(threads):
        for op in ops:
            for m in m_list:
                for n in sorted(n_list):
                    if m > n:
                        continue
                    ns = time_call(_conv_case(op, n, m, c, b, rng, path), iterations, warmup)
                    rows.append(dict(op=op, N=n, M=m, C=c, B=b, median_ns=ns, iterations=iterations))
    return BenchReport(rows)


def slopes_in_n(report, op, m):
    sel = sorted(report.select(op, M=m), key=lambda r: r["N"])
    return loglog_slope([r["N"] for r in sel], [r["median_ns"] for r in sel])


def slopes_in_m(report, op, n):
    sel = sorted(report.select(op, N=n), key=lambda r: r["M"])
    return loglog_slope([r["M"] for r in sel], [r["median_ns"] for r in sel])


def full_kernel_crossover(n_list=(5, 7, 9, 11, 13, 15, 17, 21, 25, 31), c=8, b=4, iterations=20, warmup=5,
                          seed=0, threads=1, path="complex"):
    """Time both paths with ``M = N`` (odd N); N* is the smallest N from which freq always wins."""
    rng = np.random.default_rng(seed)
    rows = []
    with pinned(threads):
        for n in sorted(n_list):
            for op in CONV_OPS:
                ns = time_call(_conv_case(op, n, n, c, b, rng, path), iterations, warmup)
                rows.append(dict(op=f"{op}_full_kernel", N=n, M=n, C=c, B=b, median_ns=ns, iterations=iterations))
    ns_sorted = sorted({r["N"] for r in rows})
    faster = {n: _pick(rows, "freq_full_kernel", n) < _pick(rows, "spatial_full_kernel", n) for n in ns_sorted}
    n_star = None
    for n in reversed(ns_sorted):
        if not faster[n]:
            break
        n_star = n
    return rows, n_star


def _pick(rows, op, n):
    return next(r["median_ns"] for r in rows if r["op"] == op and r["N"] == n)


def conv_suite(iterations=20, warmup=5, threads=1, seed=0, quick=False):
    """Everything the complexity claims need: N sweep, M sweep, M = N crossover."""
    n_list = (16, 24, 32, 48) if quick else (16, 24, 32, 48, 64)
    m_sweep = (3, 5, 7, 9, 11, 15)
    n_fixed = 32
    rep = sweep_conv(n_list=n_list, m_list=(3,), iterations=iterations, warmup=warmup, threads=threads, seed=seed)
    rep_m = sweep_conv(ops=("freq", "spatial"), n_list=(n_fixed,), m_list=m_sweep, iterations=iterations,
                       warmup=warmup, threads=threads, seed=seed)
    rows = rep.rows + [r for r in rep_m.rows if r["M"] != 3]
    cross_rows, n_star = full_kernel_crossover(
        n_list=(5, 7, 9, 13, 17, 25) if quick else (5, 7, 9, 11, 13, 15, 17, 21, 25, 31),
        iterations=iterations, warmup=warmup, threads=threads, seed=seed)
    report = BenchReport(rows + cross_rows)
    report.slopes = {
        "spatial_slope_in_N_M3": slopes_in_n(report, "spatial", 3),
        "freq_slope_in_N_M3": slopes_in_n(report, "freq", 3),
        f"freq_slope_in_M_N{n_fixed}": slopes_in_m(report, "freq", n_fixed),
        f"spatial_slope_in_M_N{n_fixed}": slopes_in_m(report, "spatial", n_fixed),
    }
    report.crossover = {"full_kernel_N_star": n_star}
    return report


# ------------------------------------------------------------------- epochs

def _epoch_timer(model, x, labels, batch_size, seed):
    from .train import SGD, smoothed_cross_entropy

    opt = SGD(model, 0.9, 0.002)
    order = np.random.default_rng(seed).permutation(len(labels))

    def run(max_batches=None):
        stop = len(labels) if max_batches is None else min(len(labels), max_batches * batch_size)
        t0 = time.perf_counter_ns()
        for i in range(0, stop, batch_size):
            idx = order[i:i + batch_size]
            logits = model.forward(x[idx], train=True)
            _, g = smoothed_cross_entropy(logits, labels[idx])
            model.backward(g)
            opt.step(1e-3)
        return time.perf_counter_ns() - t0

    return run


def epoch_overhead(spec_a, spec_b, x, labels, epochs=3, batch_size=16, seed=0, threads=1, warmup=5):
    """Total training time of ``spec_a`` over ``spec_b`` for ``epochs`` epochs.

    Epochs of the two models interleave (a-b, b-a, ...) so slow drifts in
    machine load and any first-runner penalty hit both alike.  Returns ``(ratio, seconds_a, seconds_b)``.
    """
    from .model import build_model

    with pinned(threads):
        run_a = _epoch_timer(build_model(spec_a, seed), x, labels, batch_size, seed)
        run_b = _epoch_timer(build_model(spec_b, seed), x, labels, batch_size, seed)
        run_a(warmup), run_b(warmup)
        ta = tb = 0
        for e in range(epochs):
            # a-b then b-a, so whichever runs first in a pair does not always pay for it
            if e % 2:
                tb += run_b()
                ta += run_a()
            else:
                ta += run_a()
                tb += run_b()
    return ta / tb, ta / 1e9, tb / 1e9


def cached_vs_uncached(spec, x, batch_size=64, repeats=5, seed=0, threads=1):
    """Median inference pass over ``x`` with and without eval-time bank caching."""
    from .model import build_model

    model = build_model(spec, seed)

    def infer(cache):
        def run():
            model.set_bank_caching(cache)
            if cache:
                model.forward(x[:1], train=False)  # fill the cache outside the timed region
            t0 = time.perf_counter_ns()
            for i in range(0, len(x), batch_size):
                model.forward(x[i:i + batch_size], train=False)
            return time.perf_counter_ns() - t0
        return run

    with pinned(threads):
        cached, uncached = infer(True), infer(False)
        cached(), uncached()
        tc, tu = [], []
        for _ in range(repeats):
            tc.append(cached())
            tu.append(uncached())
    model.set_bank_caching(False)
    return float(np.median(tc)), float(np.median(tu))


def epoch_suite(x, labels, desk="plain", epochs=3, batch_size=16, threads=1, seed=0):
    """NIFF vs spatial twin, baseline vs itself, and cached vs uncached inference."""
    from .model import DESK_PRESETS

    build = DESK_PRESETS[desk]
    c, h, w = x.shape[1:]
    niff = build("niff", in_channels=c, input_size=(h, w))
    base = build("spatial", in_channels=c, input_size=(h, w))
    half = replace(niff, spectral_path="half")
    ratio, t_niff, t_base = epoch_overhead(niff, base, x, labels, epochs, batch_size, seed, threads)
    ratio_half, t_half, t_base2 = epoch_overhead(half, base, x, labels, epochs, batch_size, seed, threads)
    self_ratio, t_self_a, t_self_b = epoch_overhead(base, base, x, labels, epochs, batch_size, seed, threads)
    t_cached, t_uncached = cached_vs_uncached(niff, x, threads=threads, seed=seed)
    b = batch_size
    n = h
    rows = [
        dict(op="epoch_niff", N=n, M=0, C=c, B=b, median_ns=t_niff * 1e9 / epochs, iterations=epochs),
        dict(op="epoch_spatial", N=n, M=0, C=c, B=b, median_ns=t_base * 1e9 / epochs, iterations=epochs),
        dict(op="epoch_niff_half", N=n, M=0, C=c, B=b, median_ns=t_half * 1e9 / epochs, iterations=epochs),
        dict(op="epoch_spatial_self", N=n, M=0, C=c, B=b, median_ns=t_self_a * 1e9 / epochs, iterations=epochs),
        dict(op="infer_niff_cached", N=n, M=0, C=c, B=64, median_ns=t_cached, iterations=5),
        dict(op="infer_niff_uncached", N=n, M=0, C=c, B=64, median_ns=t_uncached, iterations=5),
    ]
    report = BenchReport(rows)
    report.slopes = {
        "niff_over_spatial_epoch_ratio": ratio,
        "niff_half_over_spatial_epoch_ratio": ratio_half,
        "spatial_self_ratio": self_ratio,
        "cached_over_uncached_inference": t_cached / t_uncached,
    }
    return report


def write_summary(report, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in {**report.slopes, **report.crossover}.items():
            w.writerow([k, "" if v is None else repr(v)])
