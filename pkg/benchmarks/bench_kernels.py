"""Compiled vs pure-Python flow kernels on a batch of ERTBP trajectories.

    python benchmarks/bench_kernels.py [--nodes 256] [--repeat 3] [--threads 0]
"""

import argparse
import time

import numpy as np

from toriqp.dynamics import compiled_available, flow_batch, set_threads
from toriqp.ertbp import ErtbpModel, lagrange_points


def batch(model, nodes, seed=0):
    rng = np.random.default_rng(seed)
    L1 = lagrange_points(model.mu)[0]
    z = np.tile(L1, (nodes, 1)) + 1e-3 * rng.standard_normal((nodes, 6))
    phi = rng.random((nodes, 1))
    return z, phi


def timed(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--nodes", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--threads", type=int, default=0)
    ap.add_argument("--time", type=float, default=0.8)
    a = ap.parse_args()
    set_threads(a.threads)
    model = ErtbpModel()
    z, phi = batch(model, a.nodes)
    if not compiled_available():
        print("compiled kernel not built; only the Python backend is available")
    cases = [("state", {}), ("state+M", {"M": True}), ("state+M+d_eps", {"M": True, "deps": True})]
    print(f"{'request':<16}{'python [s]':>12}{'compiled [s]':>14}{'speed-up':>10}{'max diff':>12}")
    for name, kw in cases:
        tp, rp = timed(lambda: flow_batch(model, z, phi, a.time, 0.01, backend="python", **kw), a.repeat)
        if compiled_available():
            tc, rc = timed(lambda: flow_batch(model, z, phi, a.time, 0.01, backend="compiled", **kw), a.repeat)
            diff = float(np.max(np.abs(rp.z - rc.z)))
            print(f"{name:<16}{tp:>12.3f}{tc:>14.4f}{tp / tc:>10.1f}{diff:>12.1e}")
        else:
            print(f"{name:<16}{tp:>12.3f}{'-':>14}{'-':>10}{'-':>12}")


if __name__ == "__main__":
    main()
