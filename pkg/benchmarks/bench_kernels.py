"""Time im2col / col2im and a toy training step under both kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Each case is warmed up once (so numba compile time is excluded), then the
median of ``--repeat`` runs is reported.  Outputs of the two backends are
compared elementwise before timing.
"""

import argparse
import statistics
import time

import numpy as np

from sernet import kernels
from sernet.data import synth_dataset
from sernet.model import ModelConfig, build
from sernet.training import train

CASES = [
    # name, input shape, k, stride, padding, dilation
    ("3x3 s1 64ch 32x32", (4, 64, 32, 32), 3, 1, 1, 1),
    ("3x3 s2 32ch 64x64", (4, 32, 64, 64), 3, 2, 1, 1),
    ("7x7 s2 3ch 128x128", (2, 3, 128, 128), 7, 2, 3, 1),
    ("3x3 d12 256ch 8x8", (4, 256, 8, 8), 3, 1, 12, 12),
]


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def kernel_rows(repeat):
    rng = np.random.default_rng(0)
    for name, shape, k, s, p, d in CASES:
        x = rng.standard_normal(shape)
        ho = kernels.out_size(shape[2], k, s, p, d)
        wo = kernels.out_size(shape[3], k, s, p, d)
        row = {}
        ref = {}
        for be in ("numpy", "numba"):
            kernels.set_backend(be)
            cols = kernels.im2col(x, k, s, p, d, ho, wo)
            ref[be] = (cols, kernels.col2im(cols, shape[2], shape[3], k, s, p, d, ho, wo))
            row[f"im2col_{be}"] = median_time(lambda: kernels.im2col(x, k, s, p, d, ho, wo), repeat)
            row[f"col2im_{be}"] = median_time(
                lambda: kernels.col2im(cols, shape[2], shape[3], k, s, p, d, ho, wo), repeat
            )
        same = all(np.array_equal(a, b) for a, b in zip(ref["numpy"], ref["numba"]))
        yield name, row, same


def train_step_time(backend, iters=5):
    kernels.set_backend(backend)
    data = synth_dataset(0, 8, 32, 32, 4)
    model = build(ModelConfig(num_classes=4, width_mult=0.125, seed=1))
    train(model, data, epochs=1, batch_size=8, lr=0.01)  # warm-up
    t0 = time.perf_counter()
    train(model, data, epochs=iters, batch_size=8, lr=0.01)
    return (time.perf_counter() - t0) / iters


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args()
    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    print(f"{'case':<22} {'op':<7} {'numpy ms':>9} {'numba ms':>9} {'speedup':>8}  equal")
    for name, row, same in kernel_rows(args.repeat):
        for op in ("im2col", "col2im"):
            a, b = row[f"{op}_numpy"] * 1e3, row[f"{op}_numba"] * 1e3
            print(f"{name:<22} {op:<7} {a:9.3f} {b:9.3f} {a / b:7.2f}x  {same}")
    if not args.skip_train:
        a, b = train_step_time("numpy"), train_step_time("numba")
        print(f"\ntoy training step (1/8 width, batch 8, 32x32): numpy {a * 1e3:.1f} ms, numba {b * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
