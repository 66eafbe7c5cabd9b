"""Streaming SVRG and its stage schedules.

Each stage ``s`` averages ``k_s`` fresh sample gradients at the anchor
``w~_s``, draws ``m~`` uniformly from ``{1, ..., m_s}`` and takes ``m~``
variance-corrected steps, each on one fresh sample::

    w <- w - (eta/L) (grad psi_t(w) - grad psi_t(w~_s) + g_hat(w~_s))

The last inner iterate becomes ``w~_{s+1}``. Every sample is used once.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from . import kernels
from .core import as_vector
from .objectives import ConfigError

__all__ = [
    "BudgetError",
    "ConstantThenGeometric",
    "DivergenceError",
    "Factorial",
    "Geometric",
    "RunTrace",
    "ScheduleInfeasible",
    "StageResult",
    "SvrgSchedule",
    "TRACE_HEADER",
    "corollary2_k0_candidate",
    "run",
    "run_stage",
    "schedule_corollary1",
    "schedule_corollary2",
    "schedule_factorial",
    "schedule_from_config",
    "schedule_practical",
]

INT64_MAX = 2**63 - 1
TRACE_HEADER = ("stage", "N_s", "excess_risk", "grad_evals", "seed")
_CHUNK = 1 << 16


class ScheduleInfeasible(ValueError):
    pass


class BudgetError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Iterate left the safety ball or became non-finite.

    Attributes ``stage``, ``step``, ``w`` describe where it happened; ``trace``
    holds the completed stages when raised from :func:`run`.
    """

    def __init__(self, msg, stage=None, step=None, w=None, trace=None):
        super().__init__(msg)
        self.stage = stage
        self.step = step
        self.w = w
        self.trace = trace


def _exact(x):
    """Exact rational for a user-supplied real, read as its shortest decimal repr."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    return Fraction(repr(float(x)))


def _ceil(q):
    return -((-q.numerator) // q.denominator)


def _checked(n, what):
    if n > INT64_MAX:
        raise ScheduleInfeasible(f"schedule infeasible at this scale: {what} = {n} overflows 64-bit integers")
    return n


# --------------------------------------------------------------------------- batch growth


@dataclass(frozen=True)
class Geometric:
    """``k_s = ceil(k0 * b^s)``."""

    k0: int
    b: float

    def k(self, s):
        return _checked(_ceil(_exact(self.k0) * _exact(self.b) ** s), f"k_{s}")

    def to_config(self):
        return {"kind": "geometric", "k0": self.k0, "b": self.b}


@dataclass(frozen=True)
class ConstantThenGeometric:
    """``k_s = k0`` for ``s < s_switch``, then geometric growth by ``b``."""

    k0: int
    b: float
    s_switch: int

    def k(self, s):
        e = max(0, s - self.s_switch + 1)
        return _checked(_ceil(_exact(self.k0) * _exact(self.b) ** e), f"k_{s}")

    def to_config(self):
        return {"kind": "constant_then_geometric", "k0": self.k0, "b": self.b, "s_switch": self.s_switch}


@dataclass(frozen=True)
class Factorial:
    """``k_s = 4^s s! k0`` with ``eta_s = eta / 2^s`` and ``m_s = m 4^s``."""

    k0: int

    def k(self, s):
        return _checked(4**s * math.factorial(s) * self.k0, f"k_{s}")

    def to_config(self):
        return {"kind": "factorial", "k0": self.k0}


def _batch_from_config(cfg):
    cfg = dict(cfg)
    kind = cfg.pop("kind", "geometric")
    try:
        if kind == "geometric":
            out = Geometric(int(cfg.pop("k0")), float(cfg.pop("b")))
        elif kind == "constant_then_geometric":
            out = ConstantThenGeometric(int(cfg.pop("k0")), float(cfg.pop("b")), int(cfg.pop("s_switch")))
        elif kind == "factorial":
            out = Factorial(int(cfg.pop("k0")))
        else:
            raise ConfigError(f"unknown batch kind {kind!r}", "schedule.batch.kind")
    except KeyError as e:
        raise ConfigError(f"missing key: schedule.batch.{e.args[0]}", f"schedule.batch.{e.args[0]}") from None
    for k in cfg:
        raise ConfigError(f"unknown key: schedule.batch.{k}", f"schedule.batch.{k}")
    return out


# --------------------------------------------------------------------------- schedule


@dataclass(frozen=True)
class SvrgSchedule:
    """Stage plan for :func:`run`.

    ``L`` may be left ``None``; :func:`run` then uses the problem's smoothness.
    ``meta`` carries provenance of constructed schedules (exact pre-rounding
    values, bound parameters); it does not affect the run.
    """

    eta: float
    m: int
    batch: Geometric | ConstantThenGeometric | Factorial
    L: float | None = None
    max_stages: int | None = None
    sample_budget: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not 0.0 < self.eta < 0.25:
            raise ValueError(f"eta must lie in (0, 1/4), got {self.eta}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError("m must be a positive integer")
        if int(self.batch.k0) != self.batch.k0 or self.batch.k0 < 1:
            raise ValueError("k0 must be a positive integer")
        if getattr(self.batch, "b", 1.0) < 1.0:
            raise ValueError("batch growth factor b must be >= 1")
        if self.L is not None and not self.L > 0:
            raise ValueError("L must be positive")
        _checked(int(self.m), "m")
        _checked(int(self.batch.k0), "k0")

    def stage(self, s):
        """``(k_s, m_s, eta_s)`` for stage ``s``."""
        k = self.batch.k(s)
        if isinstance(self.batch, Factorial):
            return k, _checked(self.m * 4**s, f"m_{s}"), self.eta / 2**s
        return k, self.m, self.eta

    def budget_bound(self, s):
        """``N_s``: worst-case samples drawn by the end of stage ``s - 1`` (``sum_{tau<s} k_tau + m_tau``)."""
        total = 0
        for tau in range(s):
            k, m, _ = self.stage(tau)
            total += k + m
        return _checked(total, f"N_{s}")

    def replace(self, **kw):
        fields = dict(eta=self.eta, m=self.m, batch=self.batch, L=self.L, max_stages=self.max_stages,
                      sample_budget=self.sample_budget, meta=dict(self.meta))
        fields.update(kw)
        return SvrgSchedule(**fields)

    def to_config(self):
        return {
            "preset": "explicit",
            "eta": self.eta,
            "m": self.m,
            "batch": self.batch.to_config(),
            "L": self.L,
            "max_stages": self.max_stages,
            "sample_budget": self.sample_budget,
        }


def schedule_corollary1(p, b, kappa, alpha, L=None):
    """Parameters for convergence under alpha-bounded Hessians.

    ``eta = 1/(20 b^{p+1})``, ``m = 20 b^{p+1} kappa / eta``,
    ``k0 = 20 alpha kappa b^{p+1}``, ``k_s = b k_{s-1}``; ``m`` and ``k0`` are
    rounded up after exact rational evaluation.
    """
    if p < 2 or b < 3:
        raise ValueError("requires p >= 2 and b >= 3")
    if kappa < 1 or not 1 <= alpha <= kappa:
        raise ValueError("requires kappa >= 1 and 1 <= alpha <= kappa")
    bp1 = _pow(b, p + 1)
    eta = 1 / (20 * bp1)
    m_exact = 400 * _pow(b, 2 * (p + 1)) * _exact(kappa)
    k0_exact = 20 * _exact(alpha) * _exact(kappa) * bp1
    m = _checked(_ceil(m_exact), "m")
    k0 = _checked(_ceil(k0_exact), "k0")
    return SvrgSchedule(
        eta=float(eta), m=m, batch=Geometric(k0, b), L=L,
        meta={"variant": "corollary1", "p": p, "b": b, "kappa": kappa, "alpha": alpha,
              "eta_exact": eta, "m_exact": m_exact, "k0_exact": k0_exact},
    )


def corollary2_k0_candidate(p, b, kappa):
    """Exact ``400 kappa^2 b^{2p+3}``."""
    return 400 * _exact(kappa) ** 2 * _pow(b, 2 * p + 3)


def schedule_corollary2(p, b, kappa, kurtosis, M, sigma, L=None):
    """Parameters for convergence under self-concordance.

    As :func:`schedule_corollary1` for ``eta`` and ``m``, with
    ``k0 = max(400 kappa^2 b^{2p+3}, 10 kurtosis)``. ``M`` and ``sigma`` are
    recorded in ``meta`` for bound evaluation.
    """
    if p < 2 or b < 3:
        raise ValueError("requires p >= 2 and b >= 3")
    if kappa < 1:
        raise ValueError("requires kappa >= 1")
    if kurtosis < 1:
        raise ValueError("kurtosis must be >= 1")
    bp1 = _pow(b, p + 1)
    eta = 1 / (20 * bp1)
    m_exact = 400 * _pow(b, 2 * (p + 1)) * _exact(kappa)
    cand = corollary2_k0_candidate(p, b, kappa)
    kurt_term = 10 * _exact(kurtosis)
    k0 = _checked(max(_ceil(cand), _ceil(kurt_term)), "k0")
    return SvrgSchedule(
        eta=float(eta), m=_checked(_ceil(m_exact), "m"), batch=Geometric(k0, b), L=L,
        meta={"variant": "corollary2", "p": p, "b": b, "kappa": kappa, "kurtosis": kurtosis, "M": M,
              "sigma": sigma, "m_exact": m_exact, "k0_candidates": (cand, kurt_term),
              "kurtosis_branch": kurt_term > cand},
    )


def _pow(b, e):
    if float(e).is_integer():
        return _exact(b) ** int(e)
    return _exact(float(b) ** float(e))


def schedule_practical(kappa, target_stages=None, b=2.0, eta=0.1, m_mult=5.0, k0_mult=5.0, L=None,
                       constant_stages=0):
    """Desk-scale preset: ``m = ceil(m_mult kappa / eta)``, ``k0 = ceil(k0_mult kappa)``.

    With ``constant_stages > 0`` the batch stays at ``k0`` for that many
    stages before growing (linear-convergence phase). ``target_stages`` sets
    ``max_stages`` and a matching worst-case sample budget.
    """
    if not 0 < eta < 0.25:
        raise ValueError(f"eta must lie in (0, 1/4), got {eta}")
    if m_mult < 1 or k0_mult < 1:
        raise ValueError("multipliers must be >= 1")
    m = _ceil(_exact(m_mult) * _exact(kappa) / _exact(eta))
    k0 = _ceil(_exact(k0_mult) * _exact(kappa))
    batch = ConstantThenGeometric(k0, b, constant_stages) if constant_stages else Geometric(k0, b)
    sched = SvrgSchedule(eta=eta, m=m, batch=batch, L=L, max_stages=target_stages,
                         meta={"variant": "practical", "kappa": kappa})
    if target_stages is not None:
        sched = sched.replace(sample_budget=sched.budget_bound(target_stages))
    return sched


def schedule_factorial(kappa, eta=0.1, m_mult=5.0, k0_mult=5.0, L=None, max_stages=None):
    """Adaptive variant driving the competitive ratio to one: ``k_s = 4^s s! k0``."""
    base = schedule_practical(kappa, eta=eta, m_mult=m_mult, k0_mult=k0_mult, L=L)
    return base.replace(batch=Factorial(base.batch.k0), max_stages=max_stages,
                        meta={"variant": "factorial", "kappa": kappa})


_SCHEDULE_KEYS = {
    "practical": {"preset", "b", "eta", "m_mult", "k0_mult", "target_stages", "constant_stages", "sample_budget", "L"},
    "factorial": {"preset", "eta", "m_mult", "k0_mult", "max_stages", "sample_budget", "L"},
    "corollary1": {"preset", "p", "b", "alpha", "max_stages", "sample_budget", "L"},
    "corollary2": {"preset", "p", "b", "max_stages", "sample_budget", "L"},
    "explicit": {"preset", "eta", "m", "batch", "L", "max_stages", "sample_budget"},
}


def schedule_from_config(cfg, problem=None):
    """Build a schedule from the ``schedule`` section of a config.

    Presets ``practical``, ``factorial``, ``corollary1`` and ``corollary2``
    take ``kappa`` (and ``alpha``, kurtosis, ...) from ``problem.constants()``;
    ``explicit`` gives every field directly.
    """
    cfg = dict(cfg or {})
    preset = cfg.get("preset", "practical")
    if preset not in _SCHEDULE_KEYS:
        raise ConfigError(f"unknown schedule preset {preset!r}", "schedule.preset")
    for k in cfg:
        if k not in _SCHEDULE_KEYS[preset]:
            raise ConfigError(f"unknown key: schedule.{k}", f"schedule.{k}")
    budget = cfg.get("sample_budget")
    budget = None if budget is None else int(budget)
    if preset == "explicit":
        for key in ("eta", "m", "batch"):
            if key not in cfg:
                raise ConfigError(f"missing key: schedule.{key}", f"schedule.{key}")
        return SvrgSchedule(eta=float(cfg["eta"]), m=int(cfg["m"]), batch=_batch_from_config(cfg["batch"]),
                            L=cfg.get("L"), max_stages=cfg.get("max_stages"), sample_budget=budget)
    if problem is None:
        raise ConfigError(f"schedule preset {preset!r} needs a problem", "schedule.preset")
    c = problem.constants()
    L = cfg.get("L")
    if preset == "practical":
        s = schedule_practical(c.kappa, target_stages=cfg.get("target_stages"), b=float(cfg.get("b", 2.0)),
                               eta=float(cfg.get("eta", 0.1)), m_mult=float(cfg.get("m_mult", 5.0)),
                               k0_mult=float(cfg.get("k0_mult", 5.0)), L=L,
                               constant_stages=int(cfg.get("constant_stages", 0)))
    elif preset == "factorial":
        s = schedule_factorial(c.kappa, eta=float(cfg.get("eta", 0.1)), m_mult=float(cfg.get("m_mult", 5.0)),
                               k0_mult=float(cfg.get("k0_mult", 5.0)), L=L, max_stages=cfg.get("max_stages"))
    elif preset == "corollary1":
        s = schedule_corollary1(cfg.get("p", 2), cfg.get("b", 3), c.kappa, cfg.get("alpha", c.alpha), L=L)
        s = s.replace(max_stages=cfg.get("max_stages"))
    else:
        s = schedule_corollary2(cfg.get("p", 2), cfg.get("b", 3), c.kappa, c.kurtosis, c.self_concordance_M,
                                math.sqrt(c.sigma_sq), L=L)
        s = s.replace(max_stages=cfg.get("max_stages"))
    if budget is not None:
        s = s.replace(sample_budget=budget)
    return s


# --------------------------------------------------------------------------- running


class StageResult(NamedTuple):
    w: np.ndarray
    m_tilde: int
    grad_evals: int
    samples: int


def batch_gradient(problem, w, k, rng, threads=1, pool=None):
    """Average of ``k`` fresh sample gradients at ``w`` (fixed-order compensated sum)."""
    acc = kernels.GradientAccumulator(problem.kind, w, problem.lam, threads)
    for X, y in problem.iter_batches(rng, k, _CHUNK):
        acc.add(X, y, pool)
    return acc.mean()


def run_stage(problem, w_tilde, k, m, eta, L, rng, threads=1, bound=math.inf, pool=None):
    """One stage of streaming SVRG.

    Consumes ``k + m~`` samples from ``rng`` and returns a :class:`StageResult`
    whose ``w`` is the last inner iterate.

    Raises
    ------
    DivergenceError
        If an iterate becomes non-finite or leaves the ball of radius ``bound``.
    """
    k, m = int(k), int(m)
    if k < 1 or m < 1:
        raise ValueError("k and m must be >= 1")
    if not 0 < eta < 0.25:
        raise ValueError("eta must lie in (0, 1/4)")
    if not L > 0:
        raise ValueError("L must be positive")
    w_tilde = as_vector(w_tilde, problem.d, "w_tilde")
    g_hat = batch_gradient(problem, w_tilde, k, rng, threads, pool)
    if not np.all(np.isfinite(g_hat)):
        raise DivergenceError("non-finite batch gradient", step=0, w=w_tilde)
    m_tilde = rng.integers(1, m)
    step = eta / L
    bound_sq = bound * bound
    w = w_tilde.copy()
    done = 0
    for X, y in problem.iter_batches(rng, m_tilde, _CHUNK):
        w, n = kernels.inner_loop(problem.kind, w, w_tilde, g_hat, X, y, problem.lam, step, bound_sq)
        if n < X.shape[0]:
            raise DivergenceError(f"iterate diverged at inner step {done + n + 1}", step=done + n + 1, w=w)
        done += n
    return StageResult(w, m_tilde, k + 2 * m_tilde, k + m_tilde)


@dataclass
class TraceRecord:
    stage: int
    N_s: int
    samples: int
    w_tilde: np.ndarray
    excess_risk: float
    grad_evals: int
    m_tilde: int
    seed: int


@dataclass
class RunTrace:
    """Per-stage records of a run. ``N_s`` is the worst-case budget count, ``samples`` the actual one."""

    records: list = field(default_factory=list)
    seed: int = 0
    stream: tuple = ()
    threads: int = 1
    w0: np.ndarray | None = None
    initial_excess: float = float("nan")

    def __len__(self):
        return len(self.records)

    @property
    def w(self):
        return self.records[-1].w_tilde if self.records else self.w0

    @property
    def samples(self):
        return self.records[-1].samples if self.records else 0

    @property
    def excess(self):
        return np.array([r.excess_risk for r in self.records])

    def to_csv(self, fh=None):
        """Write ``stage,N_s,excess_risk,grad_evals,seed`` rows; returns the text when ``fh`` is None."""
        buf = io.StringIO() if fh is None else fh
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRACE_HEADER)
        for r in self.records:
            wr.writerow([r.stage, r.N_s, repr(float(r.excess_risk)), r.grad_evals, r.seed])
        if fh is None:
            return buf.getvalue()
        return None


def _excess(problem, w):
    e = problem.excess_risk(w)
    return float(getattr(e, "value", e))


def run(problem, schedule, w0, rng, threads=1, record_excess=True):
    """Run streaming SVRG until the next stage would exceed the sample budget.

    The budget check uses the worst case ``k_s + m_s`` per stage. If even the
    first stage does not fit, its inner-epoch cap is reduced to
    ``sample_budget - k_0``.

    Raises
    ------
    BudgetError
        If ``sample_budget < k_0 + 1``.
    DivergenceError
        With the partial trace attached.
    """
    w0 = as_vector(w0, problem.d, "w0")
    budget = schedule.sample_budget
    if budget is None and schedule.max_stages is None:
        raise ValueError("schedule needs sample_budget or max_stages")
    k0 = schedule.batch.k(0)
    if budget is not None and budget < k0 + 1:
        raise BudgetError("budget below first stage")
    L = schedule.L if schedule.L is not None else problem.smoothness()
    if not math.isfinite(L):
        raise ValueError("problem has unbounded smoothness; set schedule.L")
    bound = 1e6 * (1.0 + np.linalg.norm(w0) + np.linalg.norm(problem.w_star))
    trace = RunTrace(seed=rng.seed, stream=rng.stream, threads=threads, w0=w0.copy())
    if record_excess:
        trace.initial_excess = _excess(problem, w0)
    w = w0.copy()
    N = 0
    samples = 0
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        s = 0
        while schedule.max_stages is None or s < schedule.max_stages:
            k, m, eta = schedule.stage(s)
            if budget is not None and N + k + m > budget:
                if s > 0:
                    break
                m = budget - k
            try:
                res = run_stage(problem, w, k, m, eta, L, rng, threads=threads, bound=bound, pool=pool)
            except DivergenceError as err:
                err.stage = s
                err.trace = trace
                raise
            w = res.w
            N += k + m
            samples += res.samples
            trace.records.append(TraceRecord(
                stage=s, N_s=N, samples=samples, w_tilde=w.copy(),
                excess_risk=_excess(problem, w) if record_excess else float("nan"),
                grad_evals=res.grad_evals, m_tilde=res.m_tilde, seed=rng.seed,
            ))
            s += 1
    finally:
        if pool is not None:
            pool.shutdown()
    return trace
