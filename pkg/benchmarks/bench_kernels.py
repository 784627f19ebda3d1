"""Time the compiled convolution kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--dtype float32]

Shapes follow the desk preset (8 channels, 32x32x48 crops) and its eval
crop. Each row reports the best of ``--repeat`` runs for forward and
backward passes under both backends, plus the maximum absolute difference
between their outputs.
"""
import argparse
import time

import numpy as np

from lacare.nn import available_backends, conv3d, conv3d_backward, he_init, set_backend

SHAPES = [
    # (batch, in_ch, out_ch, D, H, W, kernel)
    (1, 1, 8, 32, 32, 48, 3),
    (1, 8, 8, 32, 32, 48, 3),
    (1, 16, 8, 32, 32, 48, 3),
    (1, 8, 8, 16, 16, 24, 3),
    (1, 8, 8, 48, 48, 64, 3),
    (1, 8, 2, 32, 32, 48, 1),
]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench(shape, dtype, repeat, rng):
    b, ci, co, d, h, w, k = shape
    x = rng.standard_normal((b, ci, d, h, w)).astype(dtype)
    gy = rng.standard_normal((b, co, d, h, w)).astype(dtype)
    p = he_init(rng, co, ci, k, dtype)
    row = {}
    outs = {}
    for name in available_backends():
        set_backend(name)
        tf, y = best_of(lambda: conv3d(x, p), repeat)
        tb, (gx, gp) = best_of(lambda: conv3d_backward(x, p, gy), repeat)
        row[name] = (tf, tb)
        outs[name] = (y, gx, gp.weight)
    set_backend("auto")
    diff = float("nan")
    if len(outs) == 2:
        diff = max(float(np.max(np.abs(a - c))) for a, c in zip(outs["compiled"], outs["python"]))
    return row, diff


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    backends = available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy fallback only")
    head = f"{'shape (b,ci,co,d,h,w,k)':<30}"
    for name in backends:
        head += f"{name + ' fwd ms':>16}{name + ' bwd ms':>16}"
    if len(backends) == 2:
        head += f"{'speedup fwd':>13}{'speedup bwd':>13}{'max |diff|':>12}"
    print(head)
    for shape in SHAPES:
        row, diff = bench(shape, args.dtype, args.repeat, rng)
        line = f"{str(shape):<30}"
        for name in backends:
            line += f"{row[name][0] * 1e3:>16.2f}{row[name][1] * 1e3:>16.2f}"
        if len(backends) == 2:
            c, p = row["compiled"], row["python"]
            line += f"{p[0] / c[0]:>12.1f}x{p[1] / c[1]:>12.1f}x{diff:>12.2e}"
        print(line)


if __name__ == "__main__":
    main()
