"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 10] [--step]

Each kernel case runs both backends on identical inputs, checks that they
agree, and reports the median wall time. ``--step`` also times one full
supervised training step of the desk-scale separator.
"""
from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from hpss_uda import _kernels as K
from hpss_uda import model as M
from hpss_uda import training as TR

# (batch, c_in, c_out, size, kh, kw): the layer shapes of the 64x64 micro model
CONV_CASES = [
    (8, 1, 8, 64, 3, 3),
    (8, 8, 8, 32, 1, 5),
    (8, 8, 8, 32, 5, 1),
    (8, 24, 8, 32, 3, 3),
    (8, 8, 8, 64, 3, 3),
]


def _median_time(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def bench_conv(repeat, rng):
    rows = []
    for n, c, o, size, kh, kw in CONV_CASES:
        xp = rng.standard_normal((n, c, size + kh - 1, size + kw - 1)).astype(np.float32)
        w = rng.standard_normal((o, c, kh, kw)).astype(np.float32)
        b = rng.standard_normal(o).astype(np.float32)
        g = rng.standard_normal((n, o, size, size)).astype(np.float32)
        outs, times = {}, {}
        for be in K.BACKENDS:
            K.set_backend(be)

            def run():
                return (K.conv_forward(xp, w, b), K.conv_grad_input(g, w, xp.shape),
                        K.conv_grad_weight(g, xp, (kh, kw)))

            outs[be] = run()
            times[be] = _median_time(run, repeat)
        err = max(float(np.max(np.abs(p - q)) / (np.max(np.abs(q)) + 1e-12))
                  for p, q in zip(outs["numba"], outs["numpy"]))
        rows.append((f"conv fwd+bwd {c}->{o} {size}x{size} k{kh}x{kw}", times, err))
    return rows


def bench_pool(repeat, rng):
    x = rng.standard_normal((8, 8, 64, 64)).astype(np.float32)
    outs, times = {}, {}
    for be in K.BACKENDS:
        K.set_backend(be)

        def run():
            out, idx = K.maxpool_forward(x)
            return out, K.maxpool_backward(out, idx)

        outs[be] = run()
        times[be] = _median_time(run, repeat)
    err = max(float(np.max(np.abs(p - q))) for p, q in zip(outs["numba"], outs["numpy"]))
    return [("maxpool fwd+bwd 8ch 64x64", times, err)]


def bench_step(repeat, rng):
    cfg = M.SeparatorConfig(64, 64, 2, (8, 8, 8), decoder_width=8)
    x = rng.random((8, 1, 64, 64)).astype(np.float32)
    y = (x * rng.random((8, 2, 64, 64))).astype(np.float32)
    times = {}
    for be in K.BACKENDS:
        K.set_backend(be)
        params = M.init_params(cfg, 0)
        opts = TR.new_optimisers()
        times[be] = _median_time(lambda: TR.supervised_step(params, x, y, opts, 1e-3, TR.LossWeights()), repeat)
    return [("supervised step, batch 8, 64x64", times, float("nan"))]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=10)
    ap.add_argument("--step", action="store_true", help="also time a full training step")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    initial = K.get_backend()
    rows = bench_conv(args.repeat, rng) + bench_pool(args.repeat, rng)
    if args.step:
        rows += bench_step(args.repeat, rng)
    K.set_backend(initial)
    print(f"{'case':<40}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}{'rel err':>10}")
    for name, t, err in rows:
        print(f"{name:<40}{t['numba'] * 1e3:>10.2f}{t['numpy'] * 1e3:>10.2f}"
              f"{t['numpy'] / t['numba']:>8.1f}x{err:>10.1e}")


if __name__ == "__main__":
    main()
