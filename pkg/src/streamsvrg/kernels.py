"""Backend selection for the hot loops.

The compiled extension ``_ckernels`` is used when it imports; otherwise the
pure-Python ``_pykernels`` runs. Setting ``STREAMSVRG_BACKEND=python`` forces
the fallback. Both backends produce bit-identical results.
"""

from __future__ import annotations

import importlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

SQUARED = 0
LOGISTIC = 1


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "cython":
        return importlib.import_module("streamsvrg._ckernels")
    if name == "python":
        return importlib.import_module("streamsvrg._pykernels")
    raise ValueError(f"unknown backend {name!r}")


def available_backends():
    out = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        out.insert(0, "cython")
    return out


def _select():
    if os.environ.get("STREAMSVRG_BACKEND", "").lower() == "python":
        return "python", load_backend("python")
    try:
        return "cython", load_backend("cython")
    except ImportError:
        return "python", load_backend("python")


BACKEND, _impl = _select()


def use_backend(name):
    """Switch the active backend at runtime (used by the benchmark and tests)."""
    global BACKEND, _impl
    _impl = load_backend(name)
    BACKEND = name


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def inner_loop(kind, w_start, w_tilde, g_hat, X, y, lam, step, bound_sq):
    """Corrected SVRG steps over the rows of ``X``; returns ``(w, steps_done)``."""
    w = np.array(w_start, dtype=np.float64, copy=True)
    done = _impl.inner_loop(kind, w, _c(w_tilde), _c(g_hat), _c(X), _c(y), float(lam), float(step), float(bound_sq))
    return w, int(done)


def sgd_loop(kind, w, w_sum, X, y, lam, steps, bound_sq):
    """SGD steps in place on ``w`` and ``w_sum``; returns steps completed."""
    return int(_impl.sgd_loop(kind, w, w_sum, _c(X), _c(y), float(lam), _c(steps), float(bound_sq)))


class GradientAccumulator:
    """Fixed-order compensated sum of per-sample gradients at a fixed point.

    With ``threads > 1`` each chunk is split into ``threads`` contiguous
    slices, each slice feeding its own Kahan accumulator; the partial sums are
    merged by a fixed pairwise tree. Results depend on the thread count but
    are bit-stable for a given count.
    """

    def __init__(self, kind, w, lam, threads=1):
        self.kind = kind
        self.w = _c(w)
        self.lam = float(lam)
        self.threads = max(1, int(threads))
        d = self.w.shape[0]
        self._acc = [np.zeros(d) for _ in range(self.threads)]
        self._comp = [np.zeros(d) for _ in range(self.threads)]
        self.count = 0

    def add(self, X, y, pool=None):
        X = _c(X)
        y = _c(y)
        n = X.shape[0]
        self.count += n
        if self.threads == 1:
            _impl.batch_grad_accumulate(self.kind, self.w, X, y, self.lam, self._acc[0], self._comp[0])
            return
        bounds = np.linspace(0, n, self.threads + 1).astype(int)

        def work(t):
            lo, hi = bounds[t], bounds[t + 1]
            if hi > lo:
                _impl.batch_grad_accumulate(
                    self.kind, self.w, X[lo:hi], y[lo:hi], self.lam, self._acc[t], self._comp[t]
                )

        if pool is None:
            with ThreadPoolExecutor(self.threads) as ex:
                list(ex.map(work, range(self.threads)))
        else:
            list(pool.map(work, range(self.threads)))

    def mean(self):
        parts = [a.copy() for a in self._acc]
        while len(parts) > 1:
            nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
            if len(parts) % 2:
                nxt.append(parts[-1])
            parts = nxt
        return parts[0] / self.count
