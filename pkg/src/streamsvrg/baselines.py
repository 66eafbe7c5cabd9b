"""Comparators: plain and iterate-averaged SGD, and exact ERM solvers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .core import NotPositiveDefiniteError, as_vector, cholesky_solve
from .objectives import LossSample, _newton
from .svrg import DivergenceError

__all__ = [
    "Constant",
    "ErmFailure",
    "ErmNotUnique",
    "ErmSolution",
    "PolynomialDecay",
    "RATE_HEADER",
    "SgdConfig",
    "bootstrap_mean_ci",
    "erm",
    "erm_logistic",
    "erm_rate_experiment",
    "erm_ridge",
    "rate_table_csv",
    "sgd_on_data",
    "sgd_run",
]

_CHUNK = 1 << 16
RATE_HEADER = ("N", "mean_excess", "ci_lo", "ci_hi", "ratio_to_sigma2_over_N", "failures")


class ErmFailure(RuntimeError):
    """ERM solver failed; ``residual`` holds the last gradient norm when known."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class ErmNotUnique(ErmFailure):
    pass


@dataclass(frozen=True)
class Constant:
    gamma: float

    def steps(self, start, n):
        return np.full(n, float(self.gamma))


@dataclass(frozen=True)
class PolynomialDecay:
    """Step ``gamma0 / n^c`` at the ``n``-th update (1-based)."""

    gamma0: float
    c: float

    def steps(self, start, n):
        idx = np.arange(start + 1, start + n + 1, dtype=np.float64)
        return self.gamma0 / idx**self.c


@dataclass(frozen=True)
class SgdConfig:
    step: Constant | PolynomialDecay
    average: bool
    sample_budget: int

    def __post_init__(self):
        if self.sample_budget < 1:
            raise ValueError("sample_budget must be >= 1")
        if self.average and isinstance(self.step, PolynomialDecay) and not 0.5 < self.step.c < 1.0:
            raise ValueError("averaged SGD with decaying steps needs 1/2 < c < 1")


def sgd_run(problem, config, w0, rng):
    """SGD over ``config.sample_budget`` fresh samples.

    Returns the last iterate, or the uniform average of ``w_1, ..., w_N``
    when ``config.average`` is set.
    """
    return _sgd(problem, config, w0, problem.iter_batches(rng, config.sample_budget, _CHUNK))


def sgd_on_data(problem, config, w0, X, y):
    """:func:`sgd_run` on the given samples, in row order (``sample_budget`` is ignored)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    return _sgd(problem, config, w0, ((X[i:i + _CHUNK], y[i:i + _CHUNK]) for i in range(0, X.shape[0], _CHUNK)))


def _sgd(problem, config, w0, batches):
    w = as_vector(w0, problem.d, "w0").copy()
    w_sum = np.zeros(problem.d)
    bound = 1e6 * (1.0 + np.linalg.norm(w) + np.linalg.norm(problem.w_star))
    done = 0
    for X, y in batches:
        steps = config.step.steps(done, X.shape[0])
        n = kernels.sgd_loop(problem.kind, w, w_sum, X, y, problem.lam, steps, bound * bound)
        if n < X.shape[0]:
            raise DivergenceError(f"SGD diverged at step {done + n + 1}", step=done + n + 1, w=w)
        done += n
    return w_sum / done if config.average else w


# --------------------------------------------------------------------------- ERM


class ErmSolution(NamedTuple):
    w_hat: np.ndarray
    n_used: int
    solver_residual: float


def _arrays(samples, y=None):
    if y is not None:
        return np.atleast_2d(np.asarray(samples, dtype=np.float64)), np.asarray(y, dtype=np.float64)
    samples = list(samples)
    if samples and isinstance(samples[0], LossSample):
        return np.array([s.x for s in samples], dtype=np.float64), np.array([s.y for s in samples], dtype=np.float64)
    raise TypeError("pass LossSample objects or arrays (X, y)")


def erm_ridge(samples, lam, y=None):
    """Minimize ``(1/N) sum (y_i - w.x_i)^2 + lam |w|^2`` by normal equations.

    ``samples`` is a list of :class:`LossSample` or, with ``y`` given, the
    design matrix.

    Raises
    ------
    ErmNotUnique
        If the normal equations are singular (``lam = 0`` with a rank
        deficient design).
    """
    X, y = _arrays(samples, y)
    N, d = X.shape
    if N < 1:
        raise ValueError("need at least one sample")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    if lam == 0 and N < d:
        raise ErmNotUnique("ERM not unique: fewer samples than dimensions")
    A = X.T @ X / N + lam * np.eye(d)
    b = X.T @ y / N
    try:
        w = cholesky_solve(A, b)
    except NotPositiveDefiniteError:
        raise ErmNotUnique("ERM not unique: singular normal equations") from None
    grad = 2.0 * (A @ w - b)
    return ErmSolution(w, N, float(np.linalg.norm(grad)))


def erm_logistic(samples, lam, w_init=None, y=None, tol=1e-10, max_iter=100):
    """Minimize ``(1/N) sum [log(1 + e^{x.w}) - y x.w] + (lam/2)|w|^2`` by damped Newton.

    Raises
    ------
    ErmFailure
        If the gradient norm is still above ``tol`` after ``max_iter`` iterations.
    """
    X, y = _arrays(samples, y)
    N, d = X.shape
    if not lam > 0:
        raise ValueError("logistic ERM needs lam > 0")
    w0 = np.zeros(d) if w_init is None else as_vector(w_init, d, "w_init")

    def value(w):
        a = X @ w
        return float(np.mean(np.logaddexp(0.0, a) - y * a) + 0.5 * lam * (w @ w))

    def grad_hess(w):
        a = X @ w
        s = 1.0 / (1.0 + np.exp(-a))
        g = X.T @ (s - y) / N + lam * w
        H = (X * (s * (1 - s))[:, None]).T @ X / N + lam * np.eye(d)
        return g, 0.5 * (H + H.T)

    w, res, _ = _newton(grad_hess, value, w0, tol, max_iter)
    if res > tol:
        raise ErmFailure(f"Newton did not reach tolerance {tol} in {max_iter} iterations (residual {res:.3e})", res)
    return ErmSolution(w, N, res)


def erm(problem, X, y):
    """ERM for ``problem``'s loss on the data ``(X, y)``."""
    if problem.family == "least_squares":
        return erm_ridge(X, problem.lam, y=y)
    return erm_logistic(X, problem.lam, y=y, w_init=problem.w_star)


# --------------------------------------------------------------------------- rate experiment


def bootstrap_mean_ci(values, rng, n_boot=2000, level=0.95):
    """Percentile bootstrap CI of the mean."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] < 2:
        return float("nan"), float("nan")
    idx = rng.generator.integers(0, v.shape[0], size=(n_boot, v.shape[0]))
    means = v[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class RateRow:
    N: int
    mean_excess: float
    ci_lo: float
    ci_hi: float
    ratio_to_sigma2_over_N: float
    failures: int
    excess: np.ndarray


def _excess(problem, w):
    e = problem.excess_risk(w)
    return float(getattr(e, "value", e))


def erm_rate_experiment(problem, N_grid, trials, rng, n_boot=2000, executor=None):
    """Monte Carlo ERM excess risk on a grid of sample sizes.

    Each ``(N, trial)`` pair uses its own child stream, so results do not
    depend on the execution order. Solver failures (e.g. non-unique ERM) are
    counted in ``failures`` and left out of the mean.
    """
    if trials < 30:
        raise ValueError("trials must be >= 30")
    sigma_sq = float(getattr(problem.sigma_squared(), "value", problem.sigma_squared()))
    rows = []
    for gi, N in enumerate(N_grid):
        N = int(N)

        def one(t, gi=gi, N=N):
            X, y = problem.sample_batch(rng.spawn(gi).spawn(t), N)
            try:
                return _excess(problem, erm(problem, X, y).w_hat)
            except ErmFailure:
                return None

        out = list(executor.map(one, range(trials))) if executor else [one(t) for t in range(trials)]
        vals = np.array([v for v in out if v is not None])
        fails = sum(v is None for v in out)
        mean = float(vals.mean()) if vals.size else float("nan")
        lo, hi = bootstrap_mean_ci(vals, rng.spawn(10**6 + gi), n_boot)
        ratio = mean / (sigma_sq / N) if sigma_sq > 0 else float("nan")
        rows.append(RateRow(N, mean, lo, hi, ratio, fails, vals))
    return rows


def rate_table_csv(rows, fh=None):
    buf = io.StringIO() if fh is None else fh
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(RATE_HEADER)
    for r in rows:
        wr.writerow([r.N, repr(r.mean_excess), repr(r.ci_lo), repr(r.ci_hi),
                     "undefined" if math.isnan(r.ratio_to_sigma2_over_N) else repr(r.ratio_to_sigma2_over_N),
                     r.failures])
    return buf.getvalue() if fh is None else None
