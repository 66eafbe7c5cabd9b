import math
from fractions import Fraction
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamsvrg import kernels
from streamsvrg.core import SeededRng
from streamsvrg.objectives import ConfigError, FiniteDesign, GaussianDesign, LinearRegressionProblem
from streamsvrg.svrg import (
    TRACE_HEADER,
    BudgetError,
    ConstantThenGeometric,
    DivergenceError,
    Factorial,
    Geometric,
    ScheduleInfeasible,
    SvrgSchedule,
    corollary2_k0_candidate,
    run,
    run_stage,
    schedule_corollary1,
    schedule_corollary2,
    schedule_factorial,
    schedule_from_config,
    schedule_practical,
)

W5 = np.ones(5) / math.sqrt(5)


def ls5(sigma=1.0):
    return LinearRegressionProblem(W5, sigma, GaussianDesign(5, 4.0))


def const_problem(w=2.0, y=None):
    # X == 1, Y == w: every sample identical
    return LinearRegressionProblem([w], 0.0, FiniteDesign([[1.0]]))


# --------------------------------------------------------------------------- run_stage


class TestRunStage:
    def test_fixed_point_at_optimum(self, backend):
        p = const_problem(2.0)
        res = run_stage(p, [2.0], 10, 20, 0.1, p.smoothness(), SeededRng(0))
        assert res.w.tolist() == [2.0]

    def test_m_one_forces_single_step(self, backend):
        p = ls5()
        res = run_stage(p, np.zeros(5), 7, 1, 0.1, p.smoothness(), SeededRng(1))
        assert res.m_tilde == 1
        assert res.grad_evals == 7 + 2
        assert res.samples == 8

    def test_forced_arithmetic(self, backend):
        # psi = (y - w x)^2 with x = 1, y = 0; w_t = w~ = 1; k = 1 gives g_hat = 2; eta / L = 0.1
        p = const_problem(0.0)
        res = run_stage(p, [1.0], 1, 1, 0.2, 2.0, SeededRng(2))
        assert res.w[0] == pytest.approx(0.8, abs=1e-15)

    def test_consumes_exactly_k_plus_m_tilde(self):
        p = ls5()
        r = SeededRng(3)
        res = run_stage(p, np.zeros(5), 30, 40, 0.1, p.smoothness(), r)
        ref = SeededRng(3)
        ref.normal((30, p.n_draws))
        ref.integers(1, 40)
        ref.normal((res.m_tilde, p.n_draws))
        np.testing.assert_array_equal(r.normal(4), ref.normal(4))

    def test_m_tilde_uniform(self):
        p = const_problem(2.0)
        counts = np.zeros(4)
        for i in range(4000):
            counts[run_stage(p, [2.0], 1, 4, 0.1, 2.0, SeededRng(4, i)).m_tilde - 1] += 1
        assert np.all(np.abs(counts - 1000) <= 4 * math.sqrt(4000 * 0.25 * 0.75))

    @pytest.mark.parametrize("kw", [dict(k=0), dict(m=0), dict(eta=0.25), dict(eta=0.0), dict(L=0.0)])
    def test_preconditions(self, kw):
        args = dict(k=1, m=1, eta=0.1, L=1.0)
        args.update(kw)
        with pytest.raises(ValueError):
            run_stage(ls5(), np.zeros(5), args["k"], args["m"], args["eta"], args["L"], SeededRng(0))

    def test_divergence_carries_state(self):
        p = ls5()
        with pytest.raises(DivergenceError) as err:
            run_stage(p, np.ones(5), 5, 500, 0.2, 1e-3, SeededRng(5), bound=1e3)
        assert err.value.step >= 1
        assert err.value.w is not None


# --------------------------------------------------------------------------- unbiasedness


def test_inner_direction_unbiased_exact(backend):
    """Enumerate every batch and inner sample of a 4-outcome problem."""
    p = LinearRegressionProblem([0.7, -1.1], 0.5, FiniteDesign([[1.0, 0.5], [-0.3, 2.0]], [0.4, 0.6]), lam=0.2,
                                bias_scale=0.3, noise="rademacher")
    probs, X, y = p.outcomes()
    assert len(probs) == 4
    w_t = np.array([0.3, 0.9])
    w_tilde = np.array([-0.5, 0.2])
    target = p.population_gradient(w_t)
    k = 2
    mean_total = np.zeros(2)
    for batch in product(range(4), repeat=k):
        pb = np.prod(probs[list(batch)])
        acc = kernels.GradientAccumulator(p.kind, w_tilde, p.lam)
        acc.add(X[list(batch)], y[list(batch)])
        g_hat = acc.mean()
        cond = np.zeros(2)
        for i in range(4):
            w_new, _ = kernels.inner_loop(p.kind, w_t, w_tilde, g_hat, X[i:i + 1], y[i:i + 1], p.lam, 1.0, math.inf)
            cond += probs[i] * (w_t - w_new)
        # conditional on the batch: grad P(w_t) + (g_hat - grad P(w~))
        np.testing.assert_allclose(cond, target + g_hat - p.population_gradient(w_tilde), atol=1e-12)
        mean_total += pb * cond
    assert np.max(np.abs(mean_total - target)) <= 1e-12


# --------------------------------------------------------------------------- schedules


class TestScheduleAlgebra:
    def test_corollary1_values(self):
        s = schedule_corollary1(2, 3, 10, 1)
        assert s.meta["eta_exact"] == Fraction(1, 540)
        assert s.eta == pytest.approx(1.85185e-3, rel=1e-5)
        assert s.m == 2_916_000
        assert s.batch.k0 == 5_400
        assert isinstance(s.batch, Geometric) and s.batch.b == 3

    def test_corollary1_alpha_monotone(self):
        k = [schedule_corollary1(2, 3, 10, a).batch.k0 for a in (1, 2, 5, 10)]
        assert k == sorted(k)
        assert k[-1] == 20 * 10 * 10 * 27

    def test_corollary1_preconditions(self):
        for args in [(1, 3, 10, 1), (2, 2, 10, 1), (2, 3, 10, 11), (2, 3, 0.5, 1)]:
            with pytest.raises(ValueError):
                schedule_corollary1(*args)

    def test_corollary2_forced(self):
        assert corollary2_k0_candidate(2, 3, 2) == 3_499_200
        assert schedule_corollary2(2, 3, 2, 1.0, 0.0, 1.0).batch.k0 == 3_499_200

    def test_corollary2_kurtosis_branch(self):
        kurt = 1e9 * 10**2
        s = schedule_corollary2(2, 3, 10, kurt, 0.0, 1.0)
        assert s.batch.k0 == math.ceil(10 * kurt)
        assert s.meta["kurtosis_branch"]

    @settings(max_examples=20, deadline=None)
    @given(st.integers(2, 5), st.integers(3, 9), st.fractions(1, 1000, max_denominator=64))
    def test_corollary2_identity(self, p, b, kappa):
        m = 400 * Fraction(b) ** (2 * (p + 1)) * kappa
        assert corollary2_k0_candidate(p, b, kappa) == b * m * kappa

    def test_overflow(self):
        with pytest.raises(ScheduleInfeasible, match="schedule infeasible at this scale"):
            schedule_corollary1(8, 50, 1e6, 1)

    def test_practical_defaults(self):
        s = schedule_practical(10)
        assert (s.m, s.batch.k0, s.eta) == (500, 50, 0.1)

    def test_practical_budget_bound(self):
        s = schedule_practical(10, target_stages=8, b=2)
        assert s.sample_budget == 50 * (2**8 - 1) + 8 * 500 == 16_750

    def test_practical_eta_rejected(self):
        with pytest.raises(ValueError):
            schedule_practical(10, eta=0.3)

    def test_practical_multipliers(self):
        with pytest.raises(ValueError):
            schedule_practical(10, m_mult=0.5)

    @pytest.mark.parametrize("sched", [schedule_practical(10, b=2), schedule_practical(3.7, b=3),
                                       schedule_corollary1(2, 3, 10, 1), schedule_factorial(4.0),
                                       schedule_practical(5, b=2, constant_stages=3)])
    def test_budget_bound_exhaustive(self, sched):
        total = 0
        for s in range(11):
            assert sched.budget_bound(s) == total
            k, m, _ = sched.stage(s)
            total += k + m

    def test_batch_sizes_nondecreasing_positive(self):
        for batch in (Geometric(5, 1.5), ConstantThenGeometric(5, 3, 4), Factorial(2)):
            ks = [batch.k(s) for s in range(8)]
            assert all(k >= 1 for k in ks)
            assert ks == sorted(ks)

    def test_constant_then_geometric(self):
        b = ConstantThenGeometric(10, 2, 3)
        assert [b.k(s) for s in range(6)] == [10, 10, 10, 20, 40, 80]

    def test_factorial(self):
        s = schedule_factorial(2.0)
        for st_ in range(5):
            k, m, eta = s.stage(st_)
            assert k == 4**st_ * math.factorial(st_) * s.batch.k0
            assert m == s.m * 4**st_
            assert eta == s.eta / 2**st_

    def test_geometric_exact_rounding(self):
        # k0 * b^s rounded up from the exact rational value
        assert Geometric(3, 1.5).k(3) == math.ceil(Fraction(3) * Fraction(3, 2) ** 3)

    def test_eta_invariant(self):
        with pytest.raises(ValueError):
            SvrgSchedule(eta=0.25, m=1, batch=Geometric(1, 2))

    def test_config_round_trip(self):
        s = schedule_practical(7.5, b=3)
        t = schedule_from_config(s.to_config())
        assert (t.eta, t.m, t.batch) == (s.eta, s.m, s.batch)

    def test_config_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown key: schedule.foo"):
            schedule_from_config({"preset": "practical", "foo": 1}, ls5())


# --------------------------------------------------------------------------- run


class TestRun:
    def test_budget_below_first_stage(self):
        s = schedule_practical(10).replace(sample_budget=50)
        with pytest.raises(BudgetError, match="budget below first stage"):
            run(ls5(), s, np.zeros(5), SeededRng(0))

    def test_budget_bookkeeping_example(self):
        s = SvrgSchedule(eta=0.1, m=50, batch=Geometric(100, 2), sample_budget=1000)
        tr = run(ls5(), s, np.zeros(5), SeededRng(1))
        assert [r.N_s for r in tr.records] == [150, 400, 850]

    def test_sample_and_gradient_accounting(self):
        s = schedule_practical(ls5().constants().kappa, b=2).replace(sample_budget=20000)
        tr = run(ls5(), s, np.zeros(5), SeededRng(2))
        ks = [s.stage(i)[0] for i in range(len(tr))]
        assert tr.samples == sum(k + r.m_tilde for k, r in zip(ks, tr.records))
        assert all(r.grad_evals == k + 2 * r.m_tilde for k, r in zip(ks, tr.records))
        Ns = [r.N_s for r in tr.records]
        assert all(a < b for a, b in zip(Ns, Ns[1:]))
        assert Ns[-1] <= 20000

    def test_stops_before_exceeding_budget(self):
        s = SvrgSchedule(eta=0.1, m=50, batch=Geometric(100, 2), sample_budget=849)
        assert len(run(ls5(), s, np.zeros(5), SeededRng(3))) == 2

    def test_first_stage_cap(self):
        s = SvrgSchedule(eta=0.1, m=50, batch=Geometric(100, 2), sample_budget=120)
        tr = run(ls5(), s, np.zeros(5), SeededRng(3))
        assert len(tr) == 1 and tr.records[0].N_s == 120 and tr.records[0].m_tilde <= 20

    def test_max_stages(self):
        s = schedule_practical(5, b=2).replace(max_stages=3)
        assert len(run(ls5(), s, np.zeros(5), SeededRng(4))) == 3

    def test_deterministic(self):
        s = schedule_practical(16, b=3).replace(sample_budget=30000)
        a = run(ls5(), s, np.zeros(5), SeededRng(5))
        b = run(ls5(), s, np.zeros(5), SeededRng(5))
        assert a.to_csv() == b.to_csv()
        for ra, rb in zip(a.records, b.records):
            assert ra.w_tilde.tobytes() == rb.w_tilde.tobytes()

    def test_backends_produce_identical_traces(self):
        s = schedule_practical(16, b=3).replace(sample_budget=30000)
        outs = []
        for b in kernels.available_backends():
            prev = kernels.BACKEND
            kernels.use_backend(b)
            try:
                outs.append(run(ls5(), s, np.zeros(5), SeededRng(6)).to_csv())
            finally:
                kernels.use_backend(prev)
        assert len(set(outs)) == 1

    def test_threaded_trace_stable(self):
        s = schedule_practical(16, b=3).replace(sample_budget=30000)
        a = run(ls5(), s, np.zeros(5), SeededRng(7), threads=3)
        b = run(ls5(), s, np.zeros(5), SeededRng(7), threads=3)
        assert a.to_csv() == b.to_csv()
        assert a.threads == 3
        serial = run(ls5(), s, np.zeros(5), SeededRng(7))
        np.testing.assert_allclose(a.excess, serial.excess, rtol=1e-6)

    def test_csv_header(self):
        s = schedule_practical(5, b=2).replace(max_stages=2)
        text = run(ls5(), s, np.zeros(5), SeededRng(8)).to_csv()
        assert text.splitlines()[0] == ",".join(TRACE_HEADER) == "stage,N_s,excess_risk,grad_evals,seed"
        assert len(text.splitlines()) == 3

    def test_divergence_attaches_partial_trace(self):
        s = schedule_practical(5, b=2).replace(max_stages=3, L=1e-4)
        with pytest.raises(DivergenceError) as err:
            run(ls5(), s, np.zeros(5), SeededRng(9))
        assert err.value.trace is not None
        assert err.value.stage == len(err.value.trace)

    def test_fixed_point_noiseless(self):
        p = ls5(sigma=0.0)
        s = schedule_practical(p.constants().kappa, b=2).replace(max_stages=2)
        tr = run(p, s, p.w_star, SeededRng(10))
        assert np.all(tr.excess <= 1e-28)

    def test_noiseless_monotone_decrease(self):
        p = ls5(sigma=0.0)
        s = schedule_practical(p.constants().kappa, b=2).replace(max_stages=4)
        mono = 0
        for seed in range(100):
            tr = run(p, s, W5 + 3.0, SeededRng(seed, 1))
            e = np.concatenate([[tr.initial_excess], tr.excess])
            mono += bool(np.all(np.diff(e) < 0))
        assert mono >= 95
