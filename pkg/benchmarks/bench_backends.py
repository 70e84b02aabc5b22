"""Time the fused kappa layer (forward + adjoint) in the compiled and numpy backends.

Usage: python benchmarks/bench_backends.py [--sizes 256,512,1024] [--repeats 5]

Prints one JSON document: per size, the best-of-repeats seconds for each
available backend and the speedup of the compiled one.
"""
import argparse
import json
import time

import numpy as np

from gcsntk import _kappa_py

try:
    from gcsntk import _kappa_ext
except ImportError:
    _kappa_ext = None


def _inputs(n, m, rng):
    x = rng.standard_normal((n, 16))
    y = rng.standard_normal((m, 16))
    u = np.linalg.norm(x, axis=1)
    v = np.linalg.norm(y, axis=1)
    sig = x @ y.T
    return sig, sig.copy(), u, v, rng.standard_normal((n, m)), rng.standard_normal((n, m))


def time_backend(mod, args, repeats):
    sig, theta, u, v, gs, gt = args
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        _, _, rho = mod.layer_forward(sig, theta, u, v, 2.0, False)
        mod.layer_backward(gs, gt, rho, theta, u, v, 2.0, False, 1e-7)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--sizes", default="256,512,1024,2048")
    ap.add_argument("--m", type=int, default=256, help="columns of the kernel block")
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []
    for n in (int(s) for s in args.sizes.split(",")):
        inputs = _inputs(n, args.m, rng)
        row = {"n": n, "m": args.m, "python": time_backend(_kappa_py, inputs, args.repeats)}
        if _kappa_ext is not None:
            row["cython"] = time_backend(_kappa_ext, inputs, args.repeats)
            row["speedup"] = row["python"] / row["cython"]
        rows.append(row)
    print(json.dumps({"compiled_available": _kappa_ext is not None, "rows": rows}, indent=2))


if __name__ == "__main__":
    main()
