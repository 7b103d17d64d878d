"""Timing comparison of the numba and numpy kernel backends.

Runs the hot kernels (convolution and grid sampling, forward and
backward) plus one full registration forward pass on each backend and
prints a table with per-call times and speedups.

Usage::

    python3 benchmarks/bench_kernels.py [--repeats 20] [--ndim 2|3]
"""

import argparse
import time

import numpy as np

from attnreg import dataio, kernels, pipeline
from attnreg.pipeline import ModelConfig, RegistrationModel


def timeit(fn, repeats):
    fn()  # warm-up (triggers jit compilation on the numba backend)
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def kernel_cases(ndim, rng):
    if ndim == 2:
        spatial, cout, cin, k = (96, 96), 16, 8, 3
    else:
        spatial, cout, cin, k = (24, 24, 24), 16, 8, 3
    x = rng.standard_normal((cin,) + spatial).astype(np.float32)
    w = rng.standard_normal((cout, cin) + (k,) * ndim).astype(np.float32)
    stride = (1,) * ndim
    pad = (k // 2,) * ndim
    y = kernels.conv_forward(x, w, stride, pad)
    gy = np.ascontiguousarray(rng.standard_normal(y.shape).astype(np.float32))

    img = rng.standard_normal((cin,) + spatial).astype(np.float32)
    coords = np.stack(
        np.meshgrid(*[np.arange(s, dtype=np.float32) for s in spatial], indexing="ij")
    )
    coords = coords + rng.standard_normal(coords.shape).astype(np.float32)
    flat = np.ascontiguousarray(coords.reshape(ndim, -1))
    sampled = kernels.grid_sample_forward(img, flat)
    gs = np.ascontiguousarray(rng.standard_normal(sampled.shape).astype(np.float32))

    return {
        "conv fwd": lambda: kernels.conv_forward(x, w, stride, pad),
        "conv bwd w": lambda: kernels.conv_backward_w(gy, x, w.shape, stride, pad),
        "conv bwd x": lambda: kernels.conv_backward_x(gy, w, x.shape, stride, pad),
        "sample fwd": lambda: kernels.grid_sample_forward(img, flat),
        "sample bwd": lambda: kernels.grid_sample_backward(gs, img, flat),
    }


def registration_case(ndim, rng):
    shape = (64, 64) if ndim == 2 else (24, 24, 24)
    pair = dataio.gen_synthetic_pair(
        dataio.SynthSpec(shape=shape, magnitude=3.0, seed=0)
    )
    model = RegistrationModel(
        ModelConfig(ndim=ndim, channels=(4, 8, 16), match_channels=8), seed=0
    )
    return lambda: pipeline.register(model, pair["fixed"], pair["moving"])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--ndim", type=int, default=2, choices=(2, 3))
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    cases = kernel_cases(args.ndim, rng)
    cases["register fwd"] = registration_case(args.ndim, rng)

    results = {}
    for backend in kernels.available_backends():
        kernels.set_backend(backend)
        for name, fn in cases.items():
            results.setdefault(name, {})[backend] = timeit(fn, args.repeats)
    kernels.set_backend("numba" if "numba" in kernels.available_backends() else "numpy")

    width = max(len(n) for n in results)
    header = f"{'case':<{width}}  " + "".join(
        f"{b + ' (ms)':>14}" for b in sorted(results[next(iter(results))])
    )
    print(f"{args.ndim}d kernels, {args.repeats} repeats per case")
    print(header)
    print("-" * len(header) + "---------")
    for name, times in results.items():
        row = f"{name:<{width}}  " + "".join(
            f"{times[b] * 1e3:>14.3f}" for b in sorted(times)
        )
        if "numba" in times and "numpy" in times:
            row += f"  x{times['numpy'] / times['numba']:.1f}"
        print(row)


if __name__ == "__main__":
    main()
