#!/usr/bin/env python3
"""Benchmark the MAC kernel backends (compiled extension vs numpy).

Runs the layer-level kernel on shapes representative of small-CNN training
and prints per-backend wall times and the speedup. The two backends are
bit-for-bit equivalent; equality is asserted on every case.

Usage: python benchmarks/bench_kernels.py [--repeat 5] [--threads N]
"""
import argparse
import time

import numpy as np

from pimtrain import _kernels
from pimtrain._kernels import _macref

CASES = [
    # name, scheme, rows, n_out, groups, n_group, b_imc, b_w, b_a, m
    ("conv 16ch 16x16 m4", 2, 8192, 16, 1, 144, 5, 4, 4, 4),
    ("conv 16ch 16x16 m1", 2, 8192, 16, 1, 144, 5, 4, 4, 1),
    ("conv 32ch 8x8  m4", 2, 2048, 32, 2, 144, 5, 4, 4, 4),
    ("dense 144->144 m1", 2, 4096, 144, 1, 144, 7, 4, 4, 1),
    ("native 9 9x9", 0, 8192, 32, 16, 9, 5, 4, 4, 1),
    ("differential m2", 1, 4096, 32, 2, 144, 6, 4, 4, 2),
]


def bench(fn, *args, repeat=5, **kw):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--threads", type=int, default=1)
    args = ap.parse_args()

    if not _kernels.have_compiled():
        print("compiled kernel not available; nothing to compare")
        return

    from pimtrain._kernels import _mackern

    rng = np.random.default_rng(0)
    print(f"{'case':24s} {'numpy':>10s} {'compiled':>10s} {'speedup':>8s}")
    for name, scheme, rows, n_out, groups, n_group, b, bw, ba, m in CASES:
        n_in = groups * n_group
        lv = 2 ** (bw - 1) - 1
        acodes = rng.integers(0, 2 ** ba, (rows, n_in))
        wcodes = rng.integers(-lv, lv + 1, (n_out, n_in))
        kw = dict(n_group=n_group, b_imc=b, b_w=bw, b_a=ba, m=m)
        t_np, (v_np, _) = bench(_macref.mac_layer, scheme, acodes, wcodes,
                                repeat=args.repeat, **kw)
        t_cy, (v_cy, _) = bench(_mackern.mac_layer, scheme, acodes, wcodes,
                                repeat=args.repeat, n_threads=args.threads,
                                **kw)
        assert np.array_equal(v_np, v_cy), f"backend mismatch on {name}"
        print(f"{name:24s} {t_np * 1e3:9.1f}ms {t_cy * 1e3:9.1f}ms "
              f"{t_np / t_cy:7.1f}x")


if __name__ == "__main__":
    main()
