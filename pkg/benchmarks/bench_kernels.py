"""Time the compiled kernels against the numpy fallback and check they agree.

Usage: python3 benchmarks/bench_kernels.py [--size 512] [--repeat 3]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from flarekit import kernels


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    n = args.size
    img8 = rng.integers(0, 256, (n, n, 3), dtype=np.uint8)
    imgf = rng.random((n, n, 3))
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    th = np.deg2rad(3.0)
    sx = np.cos(th) * (xs - n / 2) - np.sin(th) * (ys - n / 2) + n / 2 + 0.37
    sy = np.sin(th) * (xs - n / 2) + np.cos(th) * (ys - n / 2) + n / 2 - 0.21

    cases = {
        "bilateral_u8 (strength 1)": lambda b: kernels.bilateral_u8(img8, 2.0, 25.0, backend=b),
        "bilinear_sample (rotation)": lambda b: kernels.bilinear_sample(imgf, sx, sy, backend=b),
    }
    backends = kernels.available_backends()
    print(f"image {n}x{n}x3, best of {args.repeat}; backends: {', '.join(backends)}")
    for name, run in cases.items():
        outs = {b: run(b) for b in backends}
        times = {b: best_of(lambda b=b: run(b), args.repeat) for b in backends}
        line = f"{name:28s}" + "".join(f"  {b}: {times[b] * 1e3:9.1f} ms" for b in backends)
        if "cython" in outs:
            a, c = outs["python"], outs["cython"]
            same = all(np.array_equal(x, y) for x, y in zip(a, c)) if isinstance(a, tuple) \
                else np.array_equal(a, c)
            line += f"  speedup {times['python'] / times['cython']:5.1f}x  identical={same}"
        print(line)


if __name__ == "__main__":
    main()
