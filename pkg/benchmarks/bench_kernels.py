#!/usr/bin/env python3
"""Benchmark the jitted kernel lane against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeat N]

Both lanes are imported directly (ignoring TTA_NUMBA) so one process can
time them side by side; the first jitted call is excluded as compile time.
"""

import argparse
import time

import numpy as np

from tta.kernels import _numba, _numpy


def bench(fn, args, repeat):
    fn(*args)  # warm up / compile
    t0 = time.perf_counter()
    for _ in range(repeat):
        fn(*args)
    return (time.perf_counter() - t0) / repeat


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 256)) * 4
    y = _numpy.softmax_rows(x)
    g = rng.standard_normal(x.shape)
    logy = _numpy.log_softmax_rows(x)
    ln_y, rstd = _numpy.layer_norm_rows(x, 1e-5)
    z = rng.standard_normal(x.shape)
    cs, cn = rng.random(64), rng.random(64)
    probs = _numpy.softmax_rows(rng.standard_normal((64, 256)))
    u = rng.random(64)
    v = 64
    logp = np.log(_numpy.softmax_rows(rng.standard_normal(((v + 1) * (v + 1), v))))
    logp = logp.reshape(v + 1, v + 1, v)
    ids = rng.integers(0, v, size=512).astype(np.int64)
    w = rng.standard_normal((100_000, 8))

    cases = [
        ("softmax_rows", (x,)),
        ("softmax_rows_grad", (y, g)),
        ("log_softmax_rows", (x,)),
        ("log_softmax_rows_grad", (logy, g)),
        ("layer_norm_rows", (x, 1e-5)),
        ("layer_norm_rows_grad", (ln_y, rstd, g)),
        ("mix_rows", (x, z, cs, cn)),
        ("topp_sample_rows", (probs, 0.9, u)),
        ("trigram_nll", (ids, logp, v)),
        ("argmax_hits", (w, 0)),
    ]

    print(f"{'kernel':24s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s}")
    for name, call_args in cases:
        t_np = bench(getattr(_numpy, name), call_args, args.repeat)
        t_nb = bench(getattr(_numba, name), call_args, args.repeat)
        print(f"{name:24s} {t_np * 1e6:10.1f}us {t_nb * 1e6:10.1f}us "
              f"{t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
