import math

import numpy as np
import pytest
from scipy import stats

from streamsvrg.baselines import (
    RATE_HEADER,
    Constant,
    ErmFailure,
    ErmNotUnique,
    PolynomialDecay,
    SgdConfig,
    bootstrap_mean_ci,
    erm,
    erm_logistic,
    erm_rate_experiment,
    erm_ridge,
    rate_table_csv,
    sgd_on_data,
    sgd_run,
)
from streamsvrg.core import SeededRng
from streamsvrg.objectives import (
    FiniteDesign,
    LinearRegressionProblem,
    LogisticRegressionProblem,
    LossSample,
    SphereDesign,
)
from streamsvrg.svrg import DivergenceError


def ls2(sigma=1.0):
    return LinearRegressionProblem([1.0, -1.0], sigma, SphereDesign(2, 1.0))


def ridge_objective(X, y, lam, w):
    return float(np.mean((y - X @ w) ** 2) + lam * (w @ w))


def logistic_objective(X, y, lam, w):
    a = X @ w
    return float(np.mean(np.logaddexp(0.0, a) - y * a) + 0.5 * lam * (w @ w))


# --------------------------------------------------------------------------- SGD


def test_sgd_single_step_matches_hand_update(backend):
    p = ls2()
    w0 = np.array([0.3, -0.2])
    X, y = p.sample_batch(SeededRng(5), 1)
    gamma = 0.1
    expected = w0 - gamma * p.grad_batch(w0, X, y)[0]
    for avg in (False, True):
        out = sgd_run(p, SgdConfig(Constant(gamma), avg, 1), w0, SeededRng(5))
        np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)


def test_sgd_noiseless_fixed_point(backend):
    p = ls2(sigma=0.0)
    for avg in (False, True):
        out = sgd_run(p, SgdConfig(PolynomialDecay(0.5, 0.75), avg, 500), p.w_star, SeededRng(1))
        np.testing.assert_allclose(out, p.w_star, rtol=0, atol=1e-15)


def test_sgd_config_validation():
    with pytest.raises(ValueError):
        SgdConfig(Constant(0.1), False, 0)
    with pytest.raises(ValueError):
        SgdConfig(PolynomialDecay(0.1, 0.5), True, 10)
    with pytest.raises(ValueError):
        SgdConfig(PolynomialDecay(0.1, 1.0), True, 10)
    SgdConfig(PolynomialDecay(0.1, 1.0), False, 10)


def test_polynomial_steps_are_contiguous_across_chunks():
    s = PolynomialDecay(2.0, 0.75)
    np.testing.assert_array_equal(np.concatenate([s.steps(0, 3), s.steps(3, 4)]), s.steps(0, 7))
    assert s.steps(0, 1)[0] == 2.0


def test_sgd_divergence_reports_step(backend):
    p = ls2()
    with pytest.raises(DivergenceError) as exc:
        sgd_run(p, SgdConfig(Constant(50.0), False, 10**4), np.zeros(2), SeededRng(0))
    assert exc.value.step >= 1


def test_averaged_sgd_reaches_statistical_rate(backend):
    # d=2 on the unit sphere, kappa = 2; excess within a factor 3 of sigma^2/N
    p = ls2()
    N = 10**4
    cfg = SgdConfig(PolynomialDecay(0.5, 0.6), True, N)
    ex = [p.excess_risk(sgd_run(p, cfg, np.zeros(2), SeededRng(t, 4))) for t in range(200)]
    ratio = np.mean(ex) / (p.sigma_squared() / N)
    assert 1 / 3 <= ratio <= 3


def test_sgd_on_data_matches_streaming(backend):
    p = ls2()
    X, y = p.sample_batch(SeededRng(9), 300)
    cfg = SgdConfig(PolynomialDecay(0.5, 0.75), True, 300)
    np.testing.assert_array_equal(sgd_on_data(p, cfg, np.zeros(2), X, y), sgd_run(p, cfg, np.zeros(2), SeededRng(9)))


def test_swap_changes_path_not_distribution(backend):
    p = ls2()
    N = 1000
    cfg = SgdConfig(PolynomialDecay(0.5, 0.75), True, N)
    a, b = [], []
    pathwise_equal = 0
    for t in range(200):
        X, y = p.sample_batch(SeededRng(t, 77), N)
        wa = sgd_on_data(p, cfg, np.zeros(2), X, y)
        perm = np.arange(N)
        perm[[0, N - 1]] = perm[[N - 1, 0]]
        wb = sgd_on_data(p, cfg, np.zeros(2), X[perm], y[perm])
        pathwise_equal += np.array_equal(wa, wb)
        a.append(p.excess_risk(wa))
        b.append(p.excess_risk(wb))
    assert pathwise_equal == 0
    assert stats.ks_2samp(a, b).pvalue > 0.01


# --------------------------------------------------------------------------- ERM ridge


def test_erm_ridge_single_sample():
    sol = erm_ridge([LossSample(np.array([1.0]), 3.0)], 0.0)
    assert sol.w_hat[0] == pytest.approx(3.0, abs=1e-15)
    assert sol.n_used == 1


def test_erm_ridge_shrinks_with_lambda(np_rng):
    X = np_rng.normal(size=(40, 3))
    y = X @ np.array([1.0, 2.0, -1.0]) + np_rng.normal(size=40)
    norms = [np.linalg.norm(erm_ridge(X, lam, y=y).w_hat) for lam in (0.0, 0.1, 1.0, 10.0, 1e3, 1e6)]
    assert all(a > b for a, b in zip(norms, norms[1:]))
    assert norms[-1] < 1e-5


def test_erm_ridge_residual_and_optimality(np_rng):
    X = np_rng.normal(size=(50, 3))
    y = X @ np.array([0.5, -1.0, 2.0]) + np_rng.normal(size=50)
    for lam in (0.0, 0.3):
        sol = erm_ridge(X, lam, y=y)
        assert sol.solver_residual <= 1e-10
        f0 = ridge_objective(X, y, lam, sol.w_hat)
        dirs = np_rng.normal(size=(1000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        for u in dirs:
            assert ridge_objective(X, y, lam, sol.w_hat + 1e-3 * u) >= f0


def test_erm_ridge_not_unique():
    X = np.ones((2, 3))
    with pytest.raises(ErmNotUnique, match="ERM not unique"):
        erm_ridge(X, 0.0, y=np.ones(2))
    with pytest.raises(ErmNotUnique):
        erm_ridge(np.ones((5, 2)), 0.0, y=np.ones(5))
    erm_ridge(X, 0.1, y=np.ones(2))


def test_erm_ridge_rejects_bad_input():
    with pytest.raises(ValueError):
        erm_ridge(np.ones((3, 1)), -1.0, y=np.ones(3))
    with pytest.raises(TypeError):
        erm_ridge([1.0, 2.0], 0.0)


# --------------------------------------------------------------------------- ERM logistic


def test_erm_logistic_symmetric_data_gives_zero():
    # every covariate appears once with each label
    X = np.array([[1.0, 0.5], [1.0, 0.5], [0.3, -2.0], [0.3, -2.0]])
    y = np.array([1.0, 0.0, 1.0, 0.0])
    sol = erm_logistic(X, 0.1, y=y)
    np.testing.assert_allclose(sol.w_hat, 0.0, atol=1e-12)


def test_erm_logistic_separable_is_finite():
    X = np.array([[1.0, 0.0], [2.0, 1.0], [0.5, -1.0]])
    sol = erm_logistic(X, 0.01, y=np.ones(3))
    assert np.all(np.isfinite(sol.w_hat))
    assert sol.solver_residual <= 1e-10


def test_erm_logistic_local_optimality(np_rng):
    X = np_rng.normal(size=(100, 3))
    y = (np_rng.random(100) < 1 / (1 + np.exp(-X @ np.array([1.0, -1.0, 0.5])))).astype(float)
    lam = 0.05
    sol = erm_logistic([LossSample(x, v) for x, v in zip(X, y)], lam)
    f0 = logistic_objective(X, y, lam, sol.w_hat)
    dirs = np_rng.normal(size=(1000, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    for u in dirs:
        assert logistic_objective(X, y, lam, sol.w_hat + 1e-3 * u) >= f0


def test_erm_logistic_iteration_cap():
    X = np.array([[1.0, 0.0], [2.0, 1.0], [0.5, -1.0]])
    with pytest.raises(ErmFailure) as exc:
        erm_logistic(X, 1e-4, y=np.ones(3), max_iter=1)
    assert exc.value.residual > 1e-10


def test_erm_logistic_needs_positive_lambda():
    with pytest.raises(ValueError):
        erm_logistic(np.ones((3, 1)), 0.0, y=np.ones(3))


def test_erm_dispatch():
    p = LogisticRegressionProblem([1.0, -0.5], FiniteDesign(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])), lam=0.2)
    X, y = p.sample_batch(SeededRng(3), 200)
    np.testing.assert_allclose(erm(p, X, y).w_hat, erm_logistic(X, 0.2, y=y).w_hat, atol=1e-9)
    q = ls2()
    X, y = q.sample_batch(SeededRng(3), 20)
    np.testing.assert_array_equal(erm(q, X, y).w_hat, erm_ridge(X, 0.0, y=y).w_hat)


# --------------------------------------------------------------------------- rate experiment


def test_rate_experiment_noiseless_is_zero():
    rows = erm_rate_experiment(ls2(sigma=0.0), [10, 40], 30, SeededRng(0), n_boot=200)
    for r in rows:
        assert r.mean_excess == pytest.approx(0.0, abs=1e-25)
        assert math.isnan(r.ratio_to_sigma2_over_N)
    assert "undefined" in rate_table_csv(rows)


def test_rate_experiment_needs_30_trials():
    with pytest.raises(ValueError, match="trials"):
        erm_rate_experiment(ls2(), [10], 29, SeededRng(0))


def test_rate_experiment_counts_failures():
    rows = erm_rate_experiment(ls2(), [1], 30, SeededRng(0), n_boot=100)
    assert rows[0].failures == 30
    assert math.isnan(rows[0].mean_excess)


def test_rate_experiment_ratio_near_one():
    rows = erm_rate_experiment(ls2(), [500], 200, SeededRng(11), n_boot=500)
    r = rows[0]
    assert 0.8 <= r.ratio_to_sigma2_over_N <= 1.2
    assert r.ci_lo <= r.mean_excess <= r.ci_hi


def test_rate_experiment_is_order_independent():
    from concurrent.futures import ThreadPoolExecutor

    p = ls2()
    a = erm_rate_experiment(p, [20, 50], 30, SeededRng(4), n_boot=100)
    with ThreadPoolExecutor(4) as ex:
        b = erm_rate_experiment(p, [20, 50], 30, SeededRng(4), n_boot=100, executor=ex)
    assert rate_table_csv(a) == rate_table_csv(b)


def test_rate_table_header():
    rows = erm_rate_experiment(ls2(), [20], 30, SeededRng(0), n_boot=100)
    text = rate_table_csv(rows)
    assert text.splitlines()[0] == ",".join(RATE_HEADER)
    assert len(text.splitlines()) == 2


def test_bootstrap_ci_contains_mean(np_rng):
    v = np_rng.exponential(size=200)
    lo, hi = bootstrap_mean_ci(v, SeededRng(0))
    assert lo < v.mean() < hi
    assert all(math.isnan(x) for x in bootstrap_mean_ci([1.0], SeededRng(0)))
