"""Time the compiled and pure-Python kernels on the same inputs.

    python bench/bench_kernels.py [--n 20000] [--dims 5 20] [--repeat 3]

Each row reports the best-of-``repeat`` wall time per backend, the speedup,
and whether the two outputs are bit-identical.
"""

import argparse
import time

import numpy as np

from streamsvrg import kernels
from streamsvrg.core import SeededRng
from streamsvrg.kernels import LOGISTIC, SQUARED


def _best(fn, repeat):
    best = float("inf")
    out = None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def cases(n, d, rng):
    X = rng.normal((n, d)) / np.sqrt(d)
    y = rng.normal(n)
    yb = (y > 0).astype(np.float64)
    w = rng.normal(d) * 0.1
    wt = rng.normal(d) * 0.1
    g = rng.normal(d) * 0.01
    for kind, name, lab in ((SQUARED, "squared", y), (LOGISTIC, "logistic", yb)):
        yield f"batch_grad/{name}", lambda k=kind, lb=lab: _grad(k, w, X, lb)
        yield f"inner_loop/{name}", lambda k=kind, lb=lab: kernels.inner_loop(k, w, wt, g, X, lb, 0.01, 0.01, 1e300)[0]
        yield f"sgd_loop/{name}", lambda k=kind, lb=lab: _sgd(k, w, X, lb)


def _grad(kind, w, X, y):
    acc = kernels.GradientAccumulator(kind, w, 0.01)
    acc.add(X, y)
    return acc.mean()


def _sgd(kind, w, X, y):
    w = w.copy()
    s = np.zeros_like(w)
    kernels.sgd_loop(kind, w, s, X, y, 0.01, np.full(X.shape[0], 0.01), 1e300)
    return s


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--dims", type=int, nargs="+", default=[5, 20])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled backend unavailable; timing the Python fallback only")
    active = kernels.BACKEND
    print(f"{'kernel':<22}{'d':>4}" + "".join(f"{b + ' [s]':>14}" for b in backends) + f"{'speedup':>10}{'identical':>11}")
    try:
        for d in args.dims:
            for name, fn in cases(args.n, d, SeededRng(0, d)):
                times, outs = [], []
                for b in backends:
                    kernels.use_backend(b)
                    t, out = _best(fn, args.repeat)
                    times.append(t)
                    outs.append(np.asarray(out))
                speed = times[-1] / times[0] if len(times) > 1 else 1.0
                same = all(np.array_equal(outs[0], o) for o in outs[1:])
                print(f"{name:<22}{d:>4}" + "".join(f"{t:>14.4f}" for t in times) + f"{speed:>9.1f}x{str(same):>11}")
    finally:
        kernels.use_backend(active)


if __name__ == "__main__":
    main()
