"""Verification machinery: competitive ratios, lemma suites, self-concordance
and finite-difference checks, and the initial-error decay probe.

Every stochastic PASS/FAIL here uses the convention "estimate minus three
standard errors is at most the bound".
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .baselines import ErmFailure, SgdConfig, bootstrap_mean_ci, erm, sgd_run
from .core import as_vector, m_norm_sq
from .objectives import Estimate, hessian_bound_oracle, lemma1_oracle, lemma2_oracle
from .svrg import BudgetError, DivergenceError, run, run_stage

__all__ = [
    "DecayReport",
    "RATIO_HEADER",
    "RatioReport",
    "SelfConcordanceReport",
    "SuiteResult",
    "check_self_concordance_bound",
    "competitive_ratio",
    "finite_diff_check",
    "initial_error_decay_probe",
    "lemma_suite",
    "random_points",
    "ratio_table_csv",
    "ratio_trend_probability",
]

RATIO_HEADER = (
    "N", "streaming_excess", "streaming_ci_lo", "streaming_ci_hi", "erm_excess", "erm_ci_lo", "erm_ci_hi",
    "ratio_erm_over_streaming", "ratio_streaming_over_erm", "sigma2_over_N", "sgd_excess", "failures",
)
UNDEFINED = "undefined"


def _val(v):
    return float(v.value) if isinstance(v, Estimate) else float(v)


def random_points(center, radius, n, rng):
    """``n`` points uniform in the ball of ``radius`` around ``center``."""
    center = np.asarray(center, dtype=np.float64)
    d = center.shape[0]
    Z = rng.normal((n, d + 1))
    u = Z[:, :d] / np.linalg.norm(Z[:, :d], axis=1, keepdims=True)
    r = radius * special.ndtr(Z[:, d]) ** (1.0 / d)
    return center[None, :] + r[:, None] * u


# --------------------------------------------------------------------------- finite differences


def finite_diff_check(f, grad_f, points):
    """Max relative error between ``grad_f`` and central differences of ``f``.

    The step along coordinate ``i`` is ``1e-5 (1 + |x_i|)``. The error at a
    point is ``|fd - g| / max(|g|, 1)``, so tiny gradients are compared in
    absolute terms.
    """
    worst = 0.0
    for x in np.atleast_2d(np.asarray(points, dtype=np.float64)):
        g = np.asarray(grad_f(x), dtype=np.float64)
        fd = np.empty_like(x)
        for i in range(x.shape[0]):
            h = 1e-5 * (1.0 + abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (f(xp) - f(xm)) / (xp[i] - xm[i])
        worst = max(worst, float(np.linalg.norm(fd - g) / max(np.linalg.norm(g), 1.0)))
    return worst


# --------------------------------------------------------------------------- self-concordance


@dataclass
class SelfConcordanceReport:
    passed: bool
    violations: int
    max_violation: float
    lhs: np.ndarray
    rhs: np.ndarray
    M: float


def check_self_concordance_bound(problem, w_pairs, rng=None, M=None):
    """Check the local lower bound implied by self-concordance at each ``w``.

    ``P(w*) >= P(w) + (w* - w).grad P(w) + |w - w*|^2_{H*} / (2 (1 + M |w - w*|_{H*})^2)``

    ``M`` defaults to 0 for least squares (the bound is then the exact
    second-order expansion) and to ``problem.self_concordance_M()`` otherwise.
    A point passes when ``lhs >= rhs - 1e-10 * scale``. ``rng`` is accepted
    for interface symmetry; exact problems do not use it.
    """
    if M is None:
        M = 0.0 if problem.family == "least_squares" else _val(problem.self_concordance_M())
    ws = problem.w_star
    H = problem.hessian_star
    p_star = _val(problem.population_value(ws))
    lhs, rhs = [], []
    for w in np.atleast_2d(np.asarray(w_pairs, dtype=np.float64)):
        w = as_vector(w, problem.d, "w")
        e = w - ws
        r = math.sqrt(max(m_norm_sq(e, H), 0.0))
        g = problem.population_gradient(w)
        g = np.asarray(g.value if isinstance(g, Estimate) else g)
        lhs.append(p_star)
        rhs.append(_val(problem.population_value(w)) - e @ g + r * r / (2.0 * (1.0 + M * r) ** 2))
    lhs, rhs = np.array(lhs), np.array(rhs)
    scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
    gap = rhs - lhs
    bad = gap > 1e-10 * scale
    return SelfConcordanceReport(bool(not bad.any()), int(bad.sum()), float(gap.max(initial=0.0)), lhs, rhs, float(M))


# --------------------------------------------------------------------------- lemma suites


@dataclass
class SuiteResult:
    name: str
    passed: bool
    violations: int
    probes: int
    detail: str = ""


def lemma_suite(problem, rng, n_points=100, n_mc=10**4, radius=2.0):
    """Smoothness-variance, gradient-variance and Hessian-bound oracles at ``n_points`` random ``w``.

    Points are uniform in a ball of ``radius`` around ``w*``; ``w*`` itself is
    always the first probe (the gradient-variance bound is an equality there).
    """
    pts = random_points(problem.w_star, radius, n_points - 1, rng.spawn(0))
    pts = np.vstack([problem.w_star, pts])
    consts = problem.constants()
    v1 = v2 = 0
    for i, w in enumerate(pts):
        v1 += not lemma1_oracle(problem, w, rng.spawn(1).spawn(i), n_mc).passed
        v2 += not lemma2_oracle(problem, w, rng.spawn(2).spawn(i), n_mc, consts).passed
    top, bound, ok = hessian_bound_oracle(problem)
    return [
        SuiteResult("lemma1", v1 == 0, v1, len(pts)),
        SuiteResult("lemma2", v2 == 0, v2, len(pts)),
        SuiteResult("hessian_bound", ok, int(not ok), 1, f"lambda_max={top!r} 2L={bound!r}"),
    ]


# --------------------------------------------------------------------------- competitive ratio


@dataclass
class RatioReport:
    """Streaming against ERM at one sample size.

    ``ratio`` follows the ERM-over-streaming orientation and
    ``ratio_streaming_over_erm`` is its reciprocal; both are ``None`` when the
    ratio is undefined (zero noise constant or zero denominator).
    """

    N: int
    streaming_excess: float
    streaming_ci: tuple
    erm_excess: float
    erm_ci: tuple
    ratio: float | None
    ratio_streaming_over_erm: float | None
    sigma2_over_N: float
    sgd_excess: float | None = None
    failures: dict = field(default_factory=dict)
    streaming_samples: np.ndarray = field(default=None, repr=False)
    erm_samples: np.ndarray = field(default=None, repr=False)

    @property
    def defined(self):
        return self.ratio is not None


def _streaming_estimator(schedule, w0):
    def est(problem, N, rng):
        tr = run(problem, schedule.replace(sample_budget=int(N)), w0, rng)
        return tr.w, tr.samples

    return est


def _erm_estimator(problem, N, rng):
    X, y = problem.sample_batch(rng, int(N))
    return erm(problem, X, y).w_hat, int(N)


def competitive_ratio(problem, schedule, sgd_config=None, N_grid=(), trials=200, rng=None, w0=None,
                      streaming_estimator=None, erm_estimator=None, erm_size="consumed", n_boot=2000,
                      executor=None):
    """Monte Carlo competitive ratio on a grid of sample sizes.

    For each ``N`` every trial runs streaming SVRG with budget ``N`` and fits
    ERM on an independent fresh dataset (and, with ``sgd_config``, runs SGD
    with budget ``N``). With ``erm_size="consumed"`` the ERM dataset has as
    many samples as that trial's streaming run drew; with ``"budget"`` it has
    ``N``.

    The estimators can be swapped through ``streaming_estimator`` /
    ``erm_estimator``, callables ``(problem, N, rng) -> (w, samples_used)``.
    Trial ``t`` at grid index ``g`` uses the child stream
    ``rng.spawn(g).spawn(t)`` so the result is independent of execution
    order. Failed trials are counted per arm and excluded.
    """
    if trials < 30:
        raise ValueError("trials must be >= 30")
    return _ratio_reports(problem, schedule, sgd_config, N_grid, trials, rng, w0, streaming_estimator,
                          erm_estimator, erm_size, n_boot, executor)


def _ratio_reports(problem, schedule, sgd_config, N_grid, trials, rng, w0=None, streaming_estimator=None,
                   erm_estimator=None, erm_size="consumed", n_boot=2000, executor=None):
    if erm_size not in ("consumed", "budget"):
        raise ValueError("erm_size must be 'consumed' or 'budget'")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if rng is None:
        raise ValueError("rng is required")
    w0 = np.zeros(problem.d) if w0 is None else as_vector(w0, problem.d, "w0")
    s_est = streaming_estimator or _streaming_estimator(schedule, w0)
    e_est = erm_estimator or _erm_estimator
    sigma_sq = _val(problem.sigma_squared())
    reports = []
    for gi, N in enumerate(N_grid):
        N = int(N)

        def one(t, gi=gi, N=N):
            base = rng.spawn(gi).spawn(t)
            out = {}
            arms = [("streaming", s_est), ("erm", e_est)]
            if sgd_config is not None:
                cfg = SgdConfig(sgd_config.step, sgd_config.average, N)
                arms.append(("sgd", lambda p, n, r: (sgd_run(p, cfg, w0, r), N)))
            used = N
            for j, (name, est) in enumerate(arms):
                n = used if name == "erm" and erm_size == "consumed" else N
                try:
                    w, n_used = est(problem, n, base.spawn(j))
                    out[name] = _val(problem.excess_risk(w))
                    if name == "streaming":
                        used = n_used
                except (DivergenceError, ErmFailure, BudgetError):
                    out[name] = None
            return out

        res = list(executor.map(one, range(trials))) if executor else [one(t) for t in range(trials)]
        arr = {}
        fails = {}
        for name in res[0]:
            vals = [r[name] for r in res]
            fails[name] = sum(v is None for v in vals)
            arr[name] = np.array([v for v in vals if v is not None])
        boot = rng.spawn(10**6 + gi)
        ci = (lambda v, r: bootstrap_mean_ci(v, r, n_boot)) if n_boot else (lambda v, r: (math.nan, math.nan))
        s_mean = float(arr["streaming"].mean()) if arr["streaming"].size else float("nan")
        e_mean = float(arr["erm"].mean()) if arr["erm"].size else float("nan")
        defined = sigma_sq > 0 and s_mean > 0 and e_mean > 0
        reports.append(RatioReport(
            N=N,
            streaming_excess=s_mean,
            streaming_ci=ci(arr["streaming"], boot.spawn(0)),
            erm_excess=e_mean,
            erm_ci=ci(arr["erm"], boot.spawn(1)),
            ratio=e_mean / s_mean if defined else None,
            ratio_streaming_over_erm=s_mean / e_mean if defined else None,
            sigma2_over_N=sigma_sq / N,
            sgd_excess=float(arr["sgd"].mean()) if "sgd" in arr and arr["sgd"].size else None,
            failures=fails,
            streaming_samples=arr["streaming"],
            erm_samples=arr["erm"],
        ))
    return reports


def ratio_trend_probability(first, second, rng, n_boot=2000):
    """Fraction of bootstrap resamples in which the streaming-over-ERM ratio
    of ``second`` is at most that of ``first``.

    Each arm of each report is resampled independently.
    """
    def boot_ratio(rep, r):
        s, e = rep.streaming_samples, rep.erm_samples
        i = r.generator.integers(0, s.shape[0], size=(n_boot, s.shape[0]))
        j = r.generator.integers(0, e.shape[0], size=(n_boot, e.shape[0]))
        return s[i].mean(axis=1) / e[j].mean(axis=1)

    a = boot_ratio(first, rng.spawn(0))
    b = boot_ratio(second, rng.spawn(1))
    return float(np.mean(b <= a))


def ratio_table_csv(reports, fh=None):
    buf = io.StringIO() if fh is None else fh
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(RATIO_HEADER)
    for r in reports:
        wr.writerow([
            r.N, repr(r.streaming_excess), repr(r.streaming_ci[0]), repr(r.streaming_ci[1]),
            repr(r.erm_excess), repr(r.erm_ci[0]), repr(r.erm_ci[1]),
            UNDEFINED if r.ratio is None else repr(r.ratio),
            UNDEFINED if r.ratio_streaming_over_erm is None else repr(r.ratio_streaming_over_erm),
            repr(r.sigma2_over_N),
            "" if r.sgd_excess is None else repr(r.sgd_excess),
            ";".join(f"{k}={v}" for k, v in sorted(r.failures.items())),
        ])
    return buf.getvalue() if fh is None else None


# --------------------------------------------------------------------------- initial-error decay


@dataclass
class DecayReport:
    """Per-scale excess-risk curves from :func:`initial_error_decay_probe`.

    ``excess[scale]`` has shape ``(seeds, stages + 1)``, column 0 being the
    initial excess. ``contraction[scale]`` holds the seed-averaged ratio
    ``e_s / e_{s-1}`` per stage, ``slope`` the least-squares slope of
    ``log(mean excess)`` against the stage index and ``decay`` the ratio of
    mean initial to mean final excess.
    """

    scales: list
    excess: dict
    contraction: dict
    slope: dict
    slope_se: dict
    decay: dict
    stages: dict


def _fit_slope(y):
    x = np.arange(y.shape[0], dtype=np.float64)
    if y.shape[0] < 2:
        return float("nan"), float("nan")
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    if y.shape[0] > 2:
        s2 = float(np.sum((y - A @ coef) ** 2)) / (y.shape[0] - 2)
        se = math.sqrt(s2 / np.sum((x - x.mean()) ** 2))
    else:
        se = float("nan")
    return float(coef[0]), se


def initial_error_decay_probe(problem, schedule, w0_scales, rng, seeds=100, max_stages=12, target_decay=None,
                              floor=0.0):
    """Run seeds in lockstep from ``w0 = w* + scale * u`` and record excess risk per stage.

    ``u`` is a random unit direction per seed, shared across scales, so on a
    quadratic the initial excess scales exactly with ``scale^2``. Seed ``j``
    consumes ``rng.spawn(j)`` exactly as :func:`run` would. The probe stops
    after ``max_stages`` stages, once the mean excess has decayed by
    ``target_decay``, or once it falls to ``floor``.
    """
    L = schedule.L if schedule.L is not None else problem.smoothness()
    dirs = rng.spawn(10**6).normal((seeds, problem.d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = DecayReport(list(w0_scales), {}, {}, {}, {}, {}, {})
    for si, scale in enumerate(w0_scales):
        W = problem.w_star[None, :] + scale * dirs
        streams = [rng.spawn(si).spawn(j) for j in range(seeds)]
        cols = [np.array([_val(problem.excess_risk(w)) for w in W])]
        bound = 1e6 * (1.0 + np.linalg.norm(W, axis=1) + np.linalg.norm(problem.w_star))
        for s in range(max_stages):
            k, m, eta = schedule.stage(s)
            for j in range(seeds):
                W[j] = run_stage(problem, W[j], k, m, eta, L, streams[j], bound=bound[j]).w
            cols.append(np.array([_val(problem.excess_risk(w)) for w in W]))
            mean_now = cols[-1].mean()
            if target_decay is not None and cols[0].mean() >= target_decay * mean_now:
                break
            if mean_now <= floor:
                break
        E = np.column_stack(cols)
        out.excess[scale] = E
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = E[:, 1:] / E[:, :-1]
        ok = np.isfinite(ratios)
        n_ok = ok.sum(axis=0)
        # stages where every seed sits exactly at w* have no defined contraction
        out.contraction[scale] = np.where(n_ok > 0, np.where(ok, ratios, 0.0).sum(axis=0) / np.maximum(n_ok, 1), np.nan)
        means = E.mean(axis=0)
        pos = means > 0
        out.slope[scale], out.slope_se[scale] = _fit_slope(np.log(means[pos]))
        out.decay[scale] = float(means[0] / means[-1]) if means[-1] > 0 else math.inf
        out.stages[scale] = E.shape[1] - 1
    return out
