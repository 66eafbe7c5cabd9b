"""Command-line runner: ``streamsvrg {simulate,compare,check,sweep}``.

Configs are JSON objects::

    {
      "problem":  {"family": "least_squares", "d": 5, "sigma_noise": 1.0, ...},
      "schedule": {"preset": "practical", "b": 3, "sample_budget": 16300},
      "baselines": {"erm": true, "erm_size": "consumed", "sgd": null},
      "N_grid": [1000, 2000], "trials": 200, "seed": 0, "threads": 1,
      "output": "trace.csv"
    }

Exit codes: 0 success, 1 failing check suite, 2 configuration error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from . import analysis
from .baselines import Constant, PolynomialDecay, SgdConfig
from .core import SeededRng
from .objectives import (
    ConfigError,
    Estimate,
    FiniteDesign,
    GaussianDesign,
    LinearRegressionProblem,
    LogisticRegressionProblem,
    estimate_kurtosis,
    problem_from_config,
)
from .svrg import (
    BudgetError,
    DivergenceError,
    ScheduleInfeasible,
    corollary2_k0_candidate,
    run,
    schedule_corollary1,
    schedule_from_config,
    schedule_practical,
)

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2

_TOP_KEYS = {"problem", "schedule", "baselines", "N_grid", "trials", "seed", "output", "threads", "w0", "check",
             "sweep"}
_CHECK_KEYS = {"suites", "points", "mc_samples", "kurtosis_draws"}
SUITES = ("schedule_algebra", "gradient", "lemmas", "self_concordance", "sigma_closed_form", "kurtosis")
SWEEP_HEADER = ("key", "value", "stages", "samples", "final_excess", "sigma2_over_N")


# --------------------------------------------------------------------------- config


def _int(v, key, lo=None):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or int(v) != v:
        raise ConfigError(f"{key} must be an integer", key)
    v = int(v)
    if lo is not None and v < lo:
        raise ConfigError(f"{key} must be >= {lo}", key)
    return v


def _mapping(v, key):
    if v is None:
        return {}
    if not isinstance(v, dict):
        raise ConfigError(f"{key} must be a mapping", key)
    return dict(v)


def _reject(cfg, allowed, prefix):
    for k in cfg:
        if k not in allowed:
            name = f"{prefix}.{k}" if prefix else k
            raise ConfigError(f"unknown key: {name}", name)


@dataclass
class ExperimentConfig:
    """Parsed experiment config. ``problem`` and ``schedule`` stay plain dicts
    and are validated when built."""

    problem: dict | None = None
    schedule: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=lambda: {"erm": True, "erm_size": "consumed", "sgd": None})
    N_grid: list = field(default_factory=list)
    trials: int = 200
    seed: int = 0
    output: str | None = None
    threads: int = 1
    w0: list | None = None
    check: dict = field(default_factory=dict)
    sweep: dict | None = None

    @classmethod
    def from_dict(cls, cfg):
        if not isinstance(cfg, dict):
            raise ConfigError("config must be a JSON object", "")
        _reject(cfg, _TOP_KEYS, "")
        problem = cfg.get("problem")
        if problem is not None and not isinstance(problem, dict):
            raise ConfigError("problem must be a mapping", "problem")
        baselines = _mapping(cfg.get("baselines", {"erm": True, "sgd": None}), "baselines")
        _reject(baselines, {"erm", "erm_size", "sgd"}, "baselines")
        baselines.setdefault("erm", True)
        baselines.setdefault("erm_size", "consumed")
        baselines.setdefault("sgd", None)
        if baselines["erm_size"] not in ("consumed", "budget"):
            raise ConfigError("baselines.erm_size must be 'consumed' or 'budget'", "baselines.erm_size")
        if baselines["sgd"] is not None:
            _sgd_config(baselines["sgd"], 1)
        grid = cfg.get("N_grid", [])
        if not isinstance(grid, list):
            raise ConfigError("N_grid must be a list", "N_grid")
        check = _mapping(cfg.get("check"), "check")
        _reject(check, _CHECK_KEYS, "check")
        for s in check.get("suites", []):
            if s not in SUITES:
                raise ConfigError(f"unknown suite {s!r}", "check.suites")
        sweep = cfg.get("sweep")
        if sweep is not None:
            sweep = _mapping(sweep, "sweep")
            _reject(sweep, {"key", "values"}, "sweep")
            for k in ("key", "values"):
                if k not in sweep:
                    raise ConfigError(f"missing key: sweep.{k}", f"sweep.{k}")
        w0 = cfg.get("w0")
        return cls(
            problem=None if problem is None else copy.deepcopy(problem),
            schedule=_mapping(cfg.get("schedule"), "schedule"),
            baselines=baselines,
            N_grid=[_int(n, "N_grid", 1) for n in grid],
            trials=_int(cfg.get("trials", 200), "trials", 1),
            seed=_int(cfg.get("seed", 0), "seed", 0),
            output=cfg.get("output"),
            threads=_int(cfg.get("threads", 1), "threads", 1),
            w0=None if w0 is None else [float(x) for x in w0],
            check=check,
            sweep=sweep,
        )

    def to_dict(self):
        return copy.deepcopy(asdict(self))


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config: {err}", "config") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"invalid JSON: {err}", "config") from None
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"


def _sgd_config(spec, budget):
    spec = _mapping(spec, "baselines.sgd")
    _reject(spec, {"step", "average"}, "baselines.sgd")
    step = _mapping(spec.get("step"), "baselines.sgd.step")
    kind = step.get("kind", "polynomial")
    if kind == "constant":
        _reject(step, {"kind", "gamma"}, "baselines.sgd.step")
        rule = Constant(float(step.get("gamma", 0.01)))
    elif kind == "polynomial":
        _reject(step, {"kind", "gamma0", "c"}, "baselines.sgd.step")
        rule = PolynomialDecay(float(step.get("gamma0", 0.01)), float(step.get("c", 0.75)))
    else:
        raise ConfigError(f"unknown step kind {kind!r}", "baselines.sgd.step.kind")
    try:
        return SgdConfig(rule, bool(spec.get("average", True)), budget)
    except ValueError as err:
        raise ConfigError(str(err), "baselines.sgd") from None


def _build(cfg, need_budget=True):
    if cfg.problem is None:
        raise ConfigError("missing key: problem", "problem")
    problem = problem_from_config(cfg.problem)
    try:
        schedule = schedule_from_config(cfg.schedule, problem)
    except (ValueError, ScheduleInfeasible) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(f"invalid schedule: {err}", "schedule") from None
    if need_budget and schedule.sample_budget is None and schedule.max_stages is None:
        raise ConfigError("missing key: schedule.sample_budget", "schedule.sample_budget")
    w0 = np.zeros(problem.d) if cfg.w0 is None else np.asarray(cfg.w0, dtype=np.float64)
    if w0.shape != (problem.d,):
        raise ConfigError(f"w0 must have length {problem.d}", "w0")
    return problem, schedule, w0


def _value(v):
    return float(v.value) if isinstance(v, Estimate) else float(v)


# --------------------------------------------------------------------------- output


class _Out:
    """Destination for the main artifact; summaries go to stderr when it is stdout."""

    def __init__(self, path):
        self.path = path

    def write(self, text):
        if self.path in (None, "-"):
            sys.stdout.write(text)
        else:
            with open(self.path, "w", newline="") as fh:
                fh.write(text)

    @property
    def info(self):
        return sys.stderr if self.path in (None, "-") else sys.stdout


# --------------------------------------------------------------------------- commands


def cmd_simulate(cfg):
    problem, schedule, w0 = _build(cfg)
    out = _Out(cfg.output)
    trace = run(problem, schedule, w0, SeededRng(cfg.seed), threads=cfg.threads)
    out.write(trace.to_csv())
    sig = _value(problem.sigma_squared())
    n = trace.samples
    final = trace.records[-1].excess_risk if trace.records else trace.initial_excess
    print(f"final excess risk: {final!r}", file=out.info)
    print(f"sigma^2/N: {sig / n if n else math.nan!r} (N={n})", file=out.info)
    return EXIT_OK


def cmd_compare(cfg):
    problem, schedule, w0 = _build(cfg, need_budget=False)
    if not cfg.baselines.get("erm", True):
        raise ConfigError("compare needs baselines.erm enabled", "baselines.erm")
    if not cfg.N_grid:
        raise ConfigError("missing key: N_grid", "N_grid")
    out = _Out(cfg.output)
    n_boot = 2000
    if cfg.trials < 30:
        print("warning: CI unavailable with fewer than 30 trials", file=sys.stderr)
        n_boot = 0
    sgd = _sgd_config(cfg.baselines["sgd"], 1) if cfg.baselines.get("sgd") else None
    ex = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        reports = analysis._ratio_reports(problem, schedule, sgd, cfg.N_grid, cfg.trials, SeededRng(cfg.seed),
                                          w0=w0, erm_size=cfg.baselines["erm_size"], n_boot=n_boot,
                                          executor=ex)
    finally:
        if ex is not None:
            ex.shutdown()
    out.write(analysis.ratio_table_csv(reports))
    return EXIT_OK


def _set_dotted(d, key, value):
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value


def cmd_sweep(cfg):
    if cfg.sweep is None:
        raise ConfigError("missing key: sweep", "sweep")
    key, values = cfg.sweep["key"], cfg.sweep["values"]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(SWEEP_HEADER)
    base = cfg.to_dict()
    for i, v in enumerate(values):
        d = copy.deepcopy(base)
        d["sweep"] = None
        _set_dotted(d, key, v)
        sub = ExperimentConfig.from_dict(d)
        problem, schedule, w0 = _build(sub)
        trace = run(problem, schedule, w0, SeededRng(sub.seed, (0, i)), threads=sub.threads)
        sig = _value(problem.sigma_squared())
        n = trace.samples
        final = trace.records[-1].excess_risk if trace.records else trace.initial_excess
        wr.writerow([key, json.dumps(v), len(trace), n, repr(final), repr(sig / n) if n else "nan"])
    _Out(cfg.output).write(buf.getvalue())
    return EXIT_OK


# --------------------------------------------------------------------------- check suites


def default_check_problems(seed=0):
    """The least squares, ridge and finite-support logistic instances used by ``check``."""
    w = np.ones(5) / math.sqrt(5)
    ls = LinearRegressionProblem(w, 1.0, GaussianDesign(5, 4.0), lam=0.0, seed=seed)
    ridge = LinearRegressionProblem(w, 1.0, GaussianDesign(5, 4.0), lam=0.1, bias_scale=0.3, seed=seed)
    pts = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.5], [0.5, -1.5], [2.0, 1.0], [-0.5, -0.5]])
    logit = LogisticRegressionProblem(np.array([1.0, -0.5]), FiniteDesign(pts), lam=0.1, seed=seed)
    return {"least_squares": ls, "ridge": ridge, "logistic": logit}


def _suite_schedule_algebra():
    bad = []
    s = schedule_corollary1(2, 3, 10, 1)
    if not (s.meta["eta_exact"] == Fraction(1, 540) and s.m == 2_916_000 and s.batch.k0 == 5400):
        bad.append("corollary1")
    for sched in (s, schedule_practical(10, b=2), schedule_practical(7.3, b=3)):
        total = 0
        for n in range(11):
            if sched.budget_bound(n) != total:
                bad.append(f"N_{n}")
            k, m, _ = sched.stage(n)
            total += k + m
    for p, b, kappa in [(2, 3, 2), (2, 3, 10), (3, 4, 1.5), (2, 5, 7)]:
        m = 400 * Fraction(b) ** (2 * (p + 1)) * Fraction(kappa)
        if corollary2_k0_candidate(p, b, kappa) != b * m * Fraction(kappa):
            bad.append(f"identity{(p, b, kappa)}")
    return analysis.SuiteResult("schedule_algebra", not bad, len(bad), 1, ",".join(bad))


def _suite_gradient(name, problem, rng, points):
    X, y = problem.sample_batch(rng.spawn(0), points)
    W = analysis.random_points(problem.w_star, 2.0, points, rng.spawn(1))
    worst = 0.0
    for i in range(points):
        s = (X[i:i + 1], y[i:i + 1])
        worst = max(worst, analysis.finite_diff_check(
            lambda w: float(problem.loss_batch(w, *s)[0]), lambda w: problem.grad_batch(w, *s)[0], W[i]))
    return analysis.SuiteResult(f"{name}.gradient", worst <= 1e-5, int(worst > 1e-5), points,
                                f"max_rel_err={worst:.3e}")


def _suite_self_concordance(name, problem, rng, points):
    radius = 5.0 if problem.family == "logistic" else 2.0
    n = 1000 if problem.family == "logistic" else points
    W = analysis.random_points(problem.w_star, radius, n, rng)
    rep = analysis.check_self_concordance_bound(problem, W)
    return analysis.SuiteResult(f"{name}.self_concordance", rep.passed, rep.violations, n,
                                f"M={rep.M:.4g} max_violation={rep.max_violation:.3e}")


def _suite_sigma(seed):
    # closed form against enumeration of every (x, y) outcome
    pts = np.array([[1.0, 0.0], [0.3, -1.2], [-0.7, 0.4], [1.5, 1.1]])
    worst = 0.0
    for lam, c in [(0.1, 0.0), (0.5, 0.7), (0.0, 0.4)]:
        p = LinearRegressionProblem([0.8, -0.3], 0.6, FiniteDesign(pts, [0.1, 0.2, 0.3, 0.4]), lam=lam,
                                    bias_scale=c, noise="rademacher", seed=seed)
        probs, X, y = p.outcomes()
        g = p.grad_batch(p.w_star, X, y)
        z = np.linalg.solve(p.hessian_star, g.T)
        enum = 0.5 * float(probs @ np.einsum("ij,ji->i", g, z))
        worst = max(worst, abs(enum - p.sigma_squared()))
    return analysis.SuiteResult("sigma_closed_form", worst <= 1e-10, int(worst > 1e-10), 3, f"max_abs_err={worst:.3e}")


def _suite_kurtosis(seed, draws):
    p = LinearRegressionProblem([1.0], 1.0, GaussianDesign(1, None), seed=seed)
    est = estimate_kurtosis(p, SeededRng(seed, 9), draws)
    ok = abs(est.value - 9.0) <= 0.5
    return analysis.SuiteResult("kurtosis", ok, int(not ok), 1,
                                f"estimate={est.value:.4f} se={est.se:.4f} closed_form={p.kurtosis():.4f}")


def run_check(cfg):
    """Run the invariant suites; returns the list of :class:`analysis.SuiteResult`."""
    chk = cfg.check
    suites = chk.get("suites") or list(SUITES)
    points = int(chk.get("points", 100))
    mc = int(chk.get("mc_samples", 10**4))
    draws = int(chk.get("kurtosis_draws", 10**6))
    if cfg.problem is not None:
        problems = {cfg.problem.get("family", "problem"): problem_from_config(cfg.problem)}
    else:
        problems = default_check_problems(cfg.seed)
    rng = SeededRng(cfg.seed, 5)
    results = []
    if "schedule_algebra" in suites:
        results.append(_suite_schedule_algebra())
    for i, (name, prob) in enumerate(problems.items()):
        r = rng.spawn(i)
        if "gradient" in suites:
            results.append(_suite_gradient(name, prob, r.spawn(0), points))
        if "lemmas" in suites:
            for s in analysis.lemma_suite(prob, r.spawn(1), n_points=points, n_mc=mc):
                s.name = f"{name}.{s.name}"
                results.append(s)
        if "self_concordance" in suites:
            results.append(_suite_self_concordance(name, prob, r.spawn(2), points))
    if "sigma_closed_form" in suites:
        results.append(_suite_sigma(cfg.seed))
    if "kurtosis" in suites:
        results.append(_suite_kurtosis(cfg.seed, draws))
    return results


def cmd_check(cfg):
    results = run_check(cfg)
    lines = []
    for r in results:
        line = f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.probes} probes, {r.violations} violations)"
        print(line + (f" {r.detail}" if r.detail else ""))
        lines.append(json.dumps({"suite": r.name, "passed": r.passed, "violations": r.violations,
                                 "probes": r.probes, "detail": r.detail}, sort_keys=True))
    if cfg.output:
        _Out(cfg.output).write("\n".join(lines) + "\n")
    failing = [r.name for r in results if not r.passed]
    if failing:
        print("failing suites: " + ", ".join(failing), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "compare": cmd_compare, "check": cmd_check, "sweep": cmd_sweep}


# --------------------------------------------------------------------------- entry point


def build_parser():
    ap = argparse.ArgumentParser(prog="streamsvrg", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=name != "check", help="JSON experiment config")
        sp.add_argument("--seed", type=int, help="override config seed")
        sp.add_argument("--threads", type=int, help="override config thread count")
        sp.add_argument("--out", help="output path ('-' for stdout)")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = _int(args.seed, "seed", 0)
        if args.threads is not None:
            cfg.threads = _int(args.threads, "threads", 1)
        if args.out is not None:
            cfg.output = args.out
        return COMMANDS[args.command](cfg)
    except (ConfigError, BudgetError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
