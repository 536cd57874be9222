"""Timing comparison of the sequence-kernel backends.

Runs the forward and forward+backward passes on a few batch shapes against
every installed backend and prints per-call medians. Shapes range from the
real-time detector path (one window per telemetry frame) to the training
minibatch and a whole-dataset pass.

The two backends trade places with batch size: the compiled loops win
small batches (no BLAS dispatch overhead — about 4x on the single-window
inference the control center runs every frame), while numpy's BLAS matmuls
win from roughly batch 8 upward (about 3x at the training batch of 32).
The default backend is the compiled one because the latency-critical path
is single-window; training accepts the slower batches for the simplicity
of one import-time selection, and stays well inside its time budget.

Usage: python benchmarks/bench_kernels.py [--repeats N] [--variant V]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from mgshield.gru import kernels
from mgshield.gru.params import init_params

SHAPES = (
    (1, 10, 50),     # per-frame inference in the control center
    (8, 10, 16),     # small: unit-test scale
    (32, 10, 50),    # the training minibatch
    (123 * 8, 10, 50),  # one full-dataset epoch pass
)


def _median_time(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return sorted(times)[len(times) // 2]


def bench(variant: str, repeats: int) -> None:
    rng = np.random.default_rng(0)
    rows = []
    for batch, seq_len, hidden in SHAPES:
        p = init_params(5, hidden, rng, variant=variant)
        a = p.to_arrays()
        x = rng.normal(size=(batch, seq_len, 5))
        args = (x, a["w_reset"], a["w_update"], a["w_cand"], a["b_reset"],
                a["b_update"], a["b_cand"], a["w_out"], a["b_out"],
                p.reset_in_candidate)
        per_backend = {}
        for name in sorted(kernels.BACKENDS):
            mod = kernels.get_backend(name)
            hs, r, z, c, logit, prob = mod.sequence_forward(*args)
            d_prob = 2.0 * (prob - 0.5) / batch

            def fwd(mod=mod):
                mod.sequence_forward(*args)

            def both(mod=mod, hs=hs, r=r, z=z, c=c, prob=prob, d_prob=d_prob):
                mod.sequence_backward(x, hs, r, z, c, prob, d_prob,
                                      a["w_reset"], a["w_update"], a["w_cand"],
                                      a["w_out"], p.reset_in_candidate)

            fwd()  # warm-up
            both()
            per_backend[name] = (_median_time(fwd, repeats),
                                 _median_time(both, repeats))
        rows.append(((batch, seq_len, hidden), per_backend))

    names = sorted(kernels.BACKENDS)
    print(f"variant={variant}  repeats={repeats}  active backend={kernels.BACKEND}")
    print(f"{'shape (B,T,H)':>18} {'pass':>9}", end="")
    for name in names:
        print(f" {name:>12}", end="")
    if names == ["compiled", "python"]:
        print(f" {'py/comp':>8}", end="")  # >1 means the compiled backend is faster
    print()
    for shape, per_backend in rows:
        for idx, label in ((0, "forward"), (1, "backward")):
            print(f"{str(shape):>18} {label:>9}", end="")
            vals = [per_backend[name][idx] for name in names]
            for v in vals:
                print(f" {v * 1e3:>10.3f}ms", end="")
            if names == ["compiled", "python"]:
                print(f" {vals[1] / vals[0]:>7.2f}x", end="")
            print()


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--variant", default="standard")
    args = ap.parse_args()
    bench(args.variant, args.repeats)
