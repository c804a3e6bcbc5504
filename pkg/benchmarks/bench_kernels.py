"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--systems 100] [--steps 1000]

Prints one CSV row per (kernel, backend) with the median wall time and
checks that both backends agree bit for bit.
"""
import argparse
import os
import statistics
import sys
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np  # noqa: E402

from mcegnn import kernels  # noqa: E402


def timeit(fn, repeats):
    times = []
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--systems", type=int, default=100)
    p.add_argument("--particles", type=int, default=5)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--edges", type=int, default=20000)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; only the fallback is available", file=sys.stderr)
    g = np.random.default_rng(0)
    x = g.normal(0, 0.5, (args.systems, args.particles, 3))
    v = g.normal(0, 0.5, x.shape)
    q = g.choice([-1.0, 1.0], (args.systems, args.particles))
    c = q[:, :, None] * q[:, None, :]
    vals = g.normal(size=(args.edges, 64))
    idx = np.sort(g.integers(0, args.edges // 20, args.edges))
    print("kernel,backend,median_seconds")
    results = {}
    for b in backends:
        t, out = timeit(lambda: kernels.leapfrog(x, v, c, 1e-3, 0.01, args.steps, 100, backend=b), args.repeats)
        results[("leapfrog", b)] = (t, out[0])
        print(f"leapfrog,{b},{t:.6f}")
        t, out = timeit(lambda: kernels.scatter_add_rows(vals, idx, args.edges // 20, backend=b), args.repeats)
        results[("scatter_add_rows", b)] = (t, out)
        print(f"scatter_add_rows,{b},{t:.6f}")
    if len(backends) == 2:
        for k in ("leapfrog", "scatter_add_rows"):
            same = results[(k, "compiled")][1].tobytes() == results[(k, "python")][1].tobytes()
            speed = results[(k, "python")][0] / results[(k, "compiled")][0]
            print(f"# {k}: speedup {speed:.1f}x, bit-identical {same}")


if __name__ == "__main__":
    main()
