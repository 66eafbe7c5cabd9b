"""Synthetic stochastic objectives with known population quantities.

Two families are provided:

* :class:`LinearRegressionProblem` -- ``psi(w) = (Y - w.X)^2 + lam |w|^2``,
  optionally mis-specified through an additive quadratic bias on ``E[Y|X]``.
* :class:`LogisticRegressionProblem` -- ``psi(w) = log(1 + e^{X.w}) - Y X.w
  + (lam/2) |w|^2`` with ``Y`` in {0, 1}.

Population value, gradient, Hessian, minimizer and the noise constant
``sigma^2 = E |grad psi(w*)|^2_{H*^{-1}} / 2`` are exact for least squares on
every design and for logistic regression on finite-support designs. Logistic
regression on a continuous design falls back to Monte Carlo, and every such
quantity is returned as an :class:`Estimate` (value plus standard error).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import special
from scipy.linalg import solve_triangular

from .core import SeededRng, as_vector, cholesky_solve, inv_m_norm_sq, psd_cholesky
from .kernels import LOGISTIC, SQUARED

__all__ = [
    "ConfigError",
    "Estimate",
    "FiniteDesign",
    "GaussianDesign",
    "LinearRegressionProblem",
    "LogisticRegressionProblem",
    "LossSample",
    "ProblemConstants",
    "SphereDesign",
    "design_from_config",
    "OracleResult",
    "estimate_kurtosis",
    "hessian_bound_oracle",
    "lemma1_oracle",
    "lemma2_oracle",
    "problem_from_config",
]

_CHUNK = 1 << 16
# stream ids reserved for a problem's own Monte Carlo work
_ANCHOR_STREAM = 7001
_EVAL_STREAM = 7002
_KURTOSIS_STREAM = 7003


class ConfigError(ValueError):
    """Invalid or incomplete problem/experiment configuration."""

    def __init__(self, msg, key=None):
        super().__init__(msg)
        self.key = key


class Estimate(NamedTuple):
    """Monte Carlo value with its standard error."""

    value: float
    se: float

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class LossSample:
    x: np.ndarray
    y: float


@dataclass(frozen=True)
class ProblemConstants:
    """Problem constants; names in ``estimated`` are Monte Carlo values (or lower estimates)."""

    mu: float
    L: float
    kappa: float
    alpha: float
    sigma_sq: float
    kurtosis: float
    self_concordance_M: float
    lam: float
    estimated: frozenset = field(default_factory=frozenset)


def _value(v):
    return float(v.value) if isinstance(v, Estimate) else float(v)


def _rowdot(X, w):
    """``X @ w`` summed in fixed column order, so results do not depend on batching."""
    out = np.zeros(X.shape[0])
    for j in range(X.shape[1]):
        out += X[:, j] * w[j]
    return out


def _mean_se(vals):
    vals = np.asarray(vals, dtype=np.float64)
    n = vals.shape[0]
    se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return Estimate(float(vals.mean()), se)


# --------------------------------------------------------------------------- designs


class GaussianDesign:
    """Identity-covariance Gaussian, truncated to ``|X| <= radius``.

    Truncation is exact and uses a fixed number of draws: the direction of a
    standard normal vector is kept and its radius is mapped through the
    truncated chi distribution by inverse CDF. ``radius=None`` disables the
    truncation (only useful for moment checks; smoothness is then infinite).
    """

    kind = "gaussian"
    isotropic = True

    def __init__(self, d, radius="default"):
        self.d = int(d)
        if self.d < 1:
            raise ConfigError("design dimension must be >= 1", "problem.d")
        if isinstance(radius, str) and radius == "default":
            radius = 4.0 * math.sqrt(self.d)
        if radius is not None:
            radius = float(radius)
            if not radius > 0 or math.isinf(radius):
                raise ConfigError("design.radius must be positive and finite (or null)", "problem.design.radius")
        self.radius = radius
        self.n_draws = self.d
        half = 0.5 * self.d
        self._mass = 1.0 if radius is None else float(special.gammainc(half, 0.5 * radius * radius))

    @property
    def sq_radius(self):
        return math.inf if self.radius is None else self.radius**2

    def covariates(self, Z):
        if self.radius is None:
            return np.array(Z, dtype=np.float64)
        half = 0.5 * self.d
        r2 = np.einsum("ij,ij->i", Z, Z)
        u = special.gammainc(half, 0.5 * r2) * self._mass
        t2 = 2.0 * special.gammaincinv(half, u)
        scale = np.sqrt(np.divide(t2, r2, out=np.zeros_like(r2), where=r2 > 0))
        return Z * scale[:, None]

    def radial_moment(self, k):
        """``E |X|^{2k}``."""
        half = 0.5 * self.d
        base = 2.0**k * math.exp(math.lgamma(half + k) - math.lgamma(half))
        if self.radius is None:
            return base
        x = 0.5 * self.radius**2
        return base * float(special.gammainc(half + k, x)) / self._mass

    def second_moment(self):
        return np.eye(self.d) * (self.radial_moment(1) / self.d)

    def to_config(self):
        return {"kind": self.kind, "radius": self.radius}


class SphereDesign:
    """Uniform on the sphere ``|X| = radius``."""

    kind = "sphere"
    isotropic = True

    def __init__(self, d, radius=1.0):
        self.d = int(d)
        if self.d < 1:
            raise ConfigError("design dimension must be >= 1", "problem.d")
        radius = float(radius)
        if not radius > 0 or math.isinf(radius):
            raise ConfigError("design.radius must be positive and finite", "problem.design.radius")
        self.radius = radius
        self.n_draws = self.d

    @property
    def sq_radius(self):
        return self.radius**2

    def covariates(self, Z):
        nrm = np.linalg.norm(Z, axis=1)
        nrm[nrm == 0] = 1.0
        return Z * (self.radius / nrm)[:, None]

    def radial_moment(self, k):
        return self.radius ** (2 * k)

    def second_moment(self):
        return np.eye(self.d) * (self.radius**2 / self.d)

    def to_config(self):
        return {"kind": self.kind, "radius": self.radius}


class FiniteDesign:
    """Finitely supported covariates ``points[i]`` with probabilities ``probs[i]``."""

    kind = "finite"
    isotropic = False
    n_draws = 1

    def __init__(self, points, probs=None):
        P = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if P.ndim != 2 or P.shape[0] < 1:
            raise ConfigError("design.points must be a non-empty list of vectors", "problem.design.points")
        if probs is None:
            probs = np.full(P.shape[0], 1.0 / P.shape[0])
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != (P.shape[0],) or np.any(probs < 0) or not math.isclose(probs.sum(), 1.0, abs_tol=1e-12):
            raise ConfigError("design.probs must be nonnegative, one per point, summing to 1", "problem.design.probs")
        self.points = P
        self.probs = probs
        self.d = P.shape[1]
        self._cum = np.cumsum(probs)
        self._cum[-1] = 1.0

    @property
    def sq_radius(self):
        return float(np.max(np.einsum("ij,ij->i", self.points, self.points)))

    def covariates(self, Z):
        u = special.ndtr(Z[:, 0])
        idx = np.minimum(np.searchsorted(self._cum, u, side="right"), len(self.probs) - 1)
        return self.points[idx]

    def second_moment(self):
        return np.einsum("i,ij,ik->jk", self.probs, self.points, self.points)

    def to_config(self):
        return {"kind": self.kind, "points": self.points.tolist(), "probs": self.probs.tolist()}


def design_from_config(cfg, d):
    cfg = dict(cfg or {})
    _reject_unknown(cfg, {"kind", "radius", "points", "probs"}, "problem.design")
    kind = cfg.get("kind", "gaussian")
    if kind == "gaussian":
        return GaussianDesign(d, cfg.get("radius", "default"))
    if kind == "sphere":
        return SphereDesign(d, cfg.get("radius", 1.0))
    if kind == "finite":
        if "points" not in cfg:
            raise ConfigError("missing key: problem.design.points", "problem.design.points")
        design = FiniteDesign(cfg["points"], cfg.get("probs"))
        if design.d != d:
            raise ConfigError(f"design points have dimension {design.d}, expected d={d}", "problem.design.points")
        return design
    raise ConfigError(f"unknown design kind {kind!r}", "problem.design.kind")


def _reject_unknown(cfg, allowed, prefix):
    for k in cfg:
        if k not in allowed:
            raise ConfigError(f"unknown key: {prefix}.{k}", f"{prefix}.{k}")


# --------------------------------------------------------------------------- base


class StochasticObjective:
    """Common sampling and per-sample evaluation for both families."""

    family = ""
    kind = -1
    exact = True

    def __init__(self, design, lam, seed):
        self.design = design
        self.d = design.d
        self.lam = float(lam)
        self.seed = int(seed)

    @property
    def n_draws(self):
        """Standard normals consumed per sample."""
        return self.design.n_draws + 1

    # sampling -------------------------------------------------------------
    def _from_normals(self, Z):
        raise NotImplementedError

    def sample_batch(self, rng, n):
        """``n`` i.i.d. samples as arrays ``(X, y)``; identical to ``n`` calls of :meth:`sample`."""
        Z = rng.normal((int(n), self.n_draws))
        return self._from_normals(Z)

    def sample(self, rng):
        X, y = self.sample_batch(rng, 1)
        return LossSample(X[0], float(y[0]))

    def iter_batches(self, rng, n, chunk=_CHUNK):
        left = int(n)
        while left > 0:
            m = min(chunk, left)
            yield self.sample_batch(rng, m)
            left -= m

    # per-sample losses ----------------------------------------------------
    def loss(self, sample, w):
        return float(self.loss_batch(np.asarray(w, dtype=np.float64), sample.x[None, :], np.array([sample.y]))[0])

    def grad(self, sample, w):
        return self.grad_batch(np.asarray(w, dtype=np.float64), sample.x[None, :], np.array([sample.y]))[0]

    # shared derived quantities -------------------------------------------
    def excess_risk(self, w):
        raise NotImplementedError

    def smoothness(self):
        """Per-sample smoothness bound ``L`` (sup of the per-sample Hessian norm)."""
        raise NotImplementedError

    def gradient_noise_at_optimum(self, X, y):
        """Per-sample ``grad psi(w*)`` for a batch."""
        return self.grad_batch(self.w_star, X, y)


def estimate_kurtosis(problem, rng, n=10**6, chunk=_CHUNK):
    """Monte Carlo estimate of ``E|g|^4 / (E|g|^2)^2`` for ``g = grad psi(w*)``.

    The standard error comes from the delta method on the two sample means.
    """
    s2 = s4 = s22 = s24 = s44 = 0.0
    for X, y in problem.iter_batches(rng, n, chunk):
        g = problem.gradient_noise_at_optimum(X, y)
        a = np.einsum("ij,ij->i", g, g)
        b = a * a
        s2 += a.sum()
        s4 += b.sum()
        s22 += (a * a).sum()
        s24 += (a * b).sum()
        s44 += (b * b).sum()
    m2, m4 = s2 / n, s4 / n
    if m2 == 0.0:
        return Estimate(1.0, 0.0)
    v22 = s22 / n - m2 * m2
    v44 = s44 / n - m4 * m4
    c24 = s24 / n - m2 * m4
    k = m4 / m2**2
    # gradient of m4 / m2^2 w.r.t. (m2, m4)
    d2, d4 = -2.0 * m4 / m2**3, 1.0 / m2**2
    var = (d2 * d2 * v22 + 2 * d2 * d4 * c24 + d4 * d4 * v44) / n
    return Estimate(float(k), float(math.sqrt(max(var, 0.0))))


# --------------------------------------------------------------------------- least squares


class LinearRegressionProblem(StochasticObjective):
    """Least squares with ``Y = w_gen.X + bias(X) + noise``.

    Parameters
    ----------
    w_star : array_like
        Generating parameter. It is the population minimizer when
        ``lam == 0`` and there is no bias.
    sigma_noise : float
        Noise standard deviation.
    design : design object
        Covariate distribution; must be bounded for finite smoothness.
    lam : float
        Ridge weight in ``(Y - w.X)^2 + lam |w|^2``.
    bias_scale : float
        Mis-specification ``E[Y|X] = w_gen.X + bias_scale * X_1^2``.
    noise : {"gaussian", "rademacher"}
        Noise law; rademacher noise gives finitely many outcomes on finite designs.
    """

    family = "least_squares"
    kind = SQUARED

    def __init__(self, w_star, sigma_noise=1.0, design=None, lam=0.0, bias_scale=0.0, noise="gaussian", seed=0):
        w_gen = as_vector(w_star, name="w_star")
        if design is None:
            design = GaussianDesign(w_gen.shape[0])
        if design.d != w_gen.shape[0]:
            raise ConfigError("w_star and design dimensions differ", "problem.w_star")
        if not sigma_noise >= 0:
            raise ConfigError("sigma_noise must be >= 0", "problem.sigma_noise")
        if not lam >= 0:
            raise ConfigError("lambda must be >= 0 for least squares", "problem.lambda")
        if noise not in ("gaussian", "rademacher"):
            raise ConfigError(f"unknown noise kind {noise!r}", "problem.noise")
        super().__init__(design, lam, seed)
        self.w_gen = w_gen
        self.sigma_noise = float(sigma_noise)
        self.bias_scale = float(bias_scale)
        self.noise = noise
        self._setup_moments()

    # -- exact design moments -------------------------------------------
    def _setup_moments(self):
        d, lam, c = self.d, self.lam, self.bias_scale
        D = self.design
        if isinstance(D, FiniteDesign):
            P, p = D.points, D.probs
            b = c * P[:, 0] ** 2
            self.Sigma = D.second_moment()
            self._e_bx = p @ (b[:, None] * P)
            self._e_b2 = float(p @ (b * b))
        else:
            self.Sigma = D.second_moment()
            self._e_bx = np.zeros(d)
            q4 = D.radial_moment(2) / (d * (d + 2))
            self._e_b2 = c * c * 3.0 * q4
        self.Sigma = 0.5 * (self.Sigma + self.Sigma.T)
        self._reg_cov = self.Sigma + lam * np.eye(d)
        psd_cholesky(self._reg_cov)
        if lam == 0 and c == 0:
            self.w_star = self.w_gen.copy()
        else:
            self.w_star = cholesky_solve(self._reg_cov, self.Sigma @ self.w_gen + self._e_bx)
        self.hessian_star = 2.0 * self._reg_cov

    def bias(self, X):
        return self.bias_scale * X[:, 0] ** 2

    def _from_normals(self, Z):
        X = self.design.covariates(Z[:, :-1])
        z = Z[:, -1]
        if self.noise == "gaussian":
            eta = self.sigma_noise * z
        else:
            eta = self.sigma_noise * np.where(z >= 0.0, 1.0, -1.0)
        y = _rowdot(X, self.w_gen) + eta
        if self.bias_scale != 0.0:
            y = y + self.bias(X)
        return X, y

    def _noise_moments(self):
        s2 = self.sigma_noise**2
        return s2, (3.0 if self.noise == "gaussian" else 1.0) * s2 * s2

    def outcomes(self):
        """All ``(prob, x, y)`` outcomes as arrays; finite designs with rademacher noise only."""
        if not isinstance(self.design, FiniteDesign) or (self.noise != "rademacher" and self.sigma_noise > 0):
            raise ValueError("outcome enumeration needs a finite design and rademacher (or zero) noise")
        P, p = self.design.points, self.design.probs
        mean = P @ self.w_gen + self.bias(P)
        if self.sigma_noise == 0:
            return p.copy(), P.copy(), mean
        s = self.sigma_noise
        probs = np.concatenate([0.5 * p, 0.5 * p])
        X = np.concatenate([P, P])
        y = np.concatenate([mean + s, mean - s])
        return probs, X, y

    # -- per-sample -------------------------------------------------------
    def loss_batch(self, w, X, y):
        r = y - X @ w
        return r * r + self.lam * (w @ w)

    def grad_batch(self, w, X, y):
        r = y - X @ w
        return -2.0 * r[:, None] * X + 2.0 * self.lam * w[None, :]

    def hessian_batch(self, w, X):
        return 2.0 * np.einsum("ij,ik->ijk", X, X) + 2.0 * self.lam * np.eye(self.d)[None]

    # -- population ---------------------------------------------------------
    def population_value(self, w):
        w = as_vector(w, self.d, "w")
        delta = self.w_gen - w
        s2, _ = self._noise_moments()
        return float(delta @ self.Sigma @ delta + 2.0 * delta @ self._e_bx + self._e_b2 + s2 + self.lam * (w @ w))

    def population_gradient(self, w):
        w = as_vector(w, self.d, "w")
        return 2.0 * (self._reg_cov @ (w - self.w_star))

    def population_hessian(self, w=None):
        return self.hessian_star.copy()

    def excess_risk(self, w):
        e = np.asarray(w, dtype=np.float64) - self.w_star
        return float(e @ self._reg_cov @ e)

    def smoothness(self):
        return 2.0 * self.design.sq_radius + 2.0 * self.lam

    def sigma_squared(self):
        """``E |grad psi(w*)|^2_{H*^{-1}} / 2``, closed form.

        Equals ``E[((Y - w*.X) X - lam w*)^T (Sigma + lam I)^{-1} (...)]``.
        """
        d, lam, c = self.d, self.lam, self.bias_scale
        A = cholesky_solve(self._reg_cov, np.eye(d))
        A = 0.5 * (A + A.T)
        s2, _ = self._noise_moments()
        ws = self.w_star
        delta = self.w_gen - ws
        D = self.design
        if isinstance(D, FiniteDesign):
            P, p = D.points, D.probs
            r = P @ delta + self.bias(P)
            U = r[:, None] * P - lam * ws[None, :]
            quad_u = np.einsum("ij,jk,ik->i", U, A, U)
            quad_x = np.einsum("ij,jk,ik->i", P, A, P)
            return float(p @ (quad_u + s2 * quad_x))
        m2 = D.radial_moment(1)
        q4 = D.radial_moment(2) / (d * (d + 2))
        q6 = D.radial_moment(3) / (d * (d + 2) * (d + 4))
        trA = float(np.trace(A))
        # odd moments of a symmetric design vanish; remaining fourth/sixth moments are isotropic
        term = q4 * (delta @ delta * trA + 2.0 * delta @ A @ delta)
        term += c * c * q6 * (12.0 * A[0, 0] + 3.0 * trA)
        term -= 2.0 * lam * (m2 / d) * (delta @ A @ ws)
        term += lam * lam * (ws @ A @ ws)
        return float(s2 * (m2 / d) * trA + term)

    def kurtosis(self):
        """Kurtosis of ``|grad psi(w*)|``; exact where available, else a Monte Carlo :class:`Estimate`."""
        s2, s4 = self._noise_moments()
        D = self.design
        ws = self.w_star
        if isinstance(D, FiniteDesign):
            P, p = D.points, D.probs
            r = P @ (self.w_gen - ws) + self.bias(P)
            U = r[:, None] * P - self.lam * ws[None, :]
            a = np.einsum("ij,ij->i", U, U)
            b = 2.0 * np.einsum("ij,ij->i", U, P)
            cx = np.einsum("ij,ij->i", P, P)
            m2 = p @ (a + s2 * cx)
            m4 = p @ (a * a + (b * b + 2 * a * cx) * s2 + cx * cx * s4)
            return 1.0 if m2 == 0 else float(m4 / m2**2)
        if self.lam == 0 and self.bias_scale == 0:
            if s2 == 0:
                return 1.0
            return float(s4 * D.radial_moment(2) / (s2 * s2 * D.radial_moment(1) ** 2))
        return estimate_kurtosis(self, SeededRng(self.seed, _KURTOSIS_STREAM))

    def constants(self):
        lam_min = float(np.linalg.eigvalsh(self.Sigma)[0])
        mu = 2.0 * (self.lam + lam_min)
        L = self.smoothness()
        kurt = self.kurtosis()
        est = frozenset({"kurtosis"}) if isinstance(kurt, Estimate) else frozenset()
        return ProblemConstants(
            mu=mu,
            L=L,
            kappa=L / mu,
            alpha=1.0,
            sigma_sq=self.sigma_squared(),
            kurtosis=_value(kurt),
            self_concordance_M=0.0,
            lam=self.lam,
            estimated=est,
        )

    def to_config(self):
        return {
            "family": self.family,
            "d": self.d,
            "sigma_noise": self.sigma_noise,
            "noise": self.noise,
            "lambda": self.lam,
            "w_star": self.w_gen.tolist(),
            "design": self.design.to_config(),
            "bias": {"kind": "quadratic" if self.bias_scale else "none", "scale": self.bias_scale},
            "seed": self.seed,
        }


# --------------------------------------------------------------------------- logistic


def _sigmoid(a):
    return special.expit(a)


def _newton(grad_hess, value, w0, tol, max_iter=100):
    """Damped Newton with Armijo backtracking; returns ``(w, grad_norm, iterations)``."""
    w = np.array(w0, dtype=np.float64)
    for it in range(max_iter):
        g, H = grad_hess(w)
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return w, gn, it
        step = cholesky_solve(H, g)
        dec = float(g @ step)
        f0 = value(w)
        t = 1.0
        while t > 1e-12:
            w_new = w - t * step
            if value(w_new) <= f0 - 0.25 * t * dec:
                break
            t *= 0.5
        else:
            w_new = w - t * step
        if np.array_equal(w_new, w):
            g, _ = grad_hess(w)
            return w, float(np.linalg.norm(g)), it
        w = w_new
    g, _ = grad_hess(w)
    return w, float(np.linalg.norm(g)), max_iter


class LogisticRegressionProblem(StochasticObjective):
    """Logistic regression with labels drawn from ``w_model``.

    The regularizer is ``(lam/2)|w|^2`` so that the population Hessian at the
    optimum is ``E[p(1-p) X X^T] + lam I`` and the strong convexity is ``lam``.

    On a :class:`FiniteDesign` all population quantities are exact sums. On
    continuous designs the minimizer is the regularized empirical minimizer
    over ``anchor_samples`` covariates (labels integrated out exactly), and
    population values are Monte Carlo :class:`Estimate` objects over
    ``eval_samples`` covariates.
    """

    family = "logistic"
    kind = LOGISTIC

    def __init__(self, w_model, design=None, lam=0.1, seed=0, anchor_samples=10**7, eval_samples=10**6):
        w_model = as_vector(w_model, name="w_star")
        if design is None:
            design = GaussianDesign(w_model.shape[0])
        if design.d != w_model.shape[0]:
            raise ConfigError("w_star and design dimensions differ", "problem.w_star")
        if not lam > 0:
            raise ConfigError("lambda must be > 0 for logistic regression", "problem.lambda")
        super().__init__(design, lam, seed)
        self.w_model = w_model
        self.anchor_samples = int(anchor_samples)
        self.eval_samples = int(eval_samples)
        self.exact = isinstance(design, FiniteDesign)
        if self.exact:
            self._X = design.points
            self._p = design.probs
            self._q = _sigmoid(self._X @ w_model)
            self.w_star, self.anchor_residual, _ = _newton(
                lambda w: (self._grad_exact(w), self._hess_exact(w)), self._value_exact, np.zeros(self.d), 1e-12
            )
            self.hessian_star = self._hess_exact(self.w_star)
        else:
            self._fit_anchor()

    # -- sampling / per-sample ----------------------------------------------
    def _from_normals(self, Z):
        X = self.design.covariates(Z[:, :-1])
        u = special.ndtr(Z[:, -1])
        y = (u < _sigmoid(_rowdot(X, self.w_model))).astype(np.float64)
        return X, y

    def outcomes(self):
        if not self.exact:
            raise ValueError("outcome enumeration needs a finite design")
        probs = np.concatenate([self._p * self._q, self._p * (1.0 - self._q)])
        X = np.concatenate([self._X, self._X])
        y = np.concatenate([np.ones(len(self._p)), np.zeros(len(self._p))])
        return probs, X, y

    def loss_batch(self, w, X, y):
        a = X @ w
        return np.logaddexp(0.0, a) - y * a + 0.5 * self.lam * (w @ w)

    def grad_batch(self, w, X, y):
        a = X @ w
        return (_sigmoid(a) - y)[:, None] * X + self.lam * w[None, :]

    def hessian_batch(self, w, X):
        s = _sigmoid(X @ w)
        return np.einsum("i,ij,ik->ijk", s * (1 - s), X, X) + self.lam * np.eye(self.d)[None]

    # -- exact (finite design) ----------------------------------------------
    def _value_exact(self, w):
        a = self._X @ w
        return float(self._p @ (np.logaddexp(0.0, a) - self._q * a) + 0.5 * self.lam * (w @ w))

    def _grad_exact(self, w):
        a = self._X @ w
        return self._X.T @ (self._p * (_sigmoid(a) - self._q)) + self.lam * w

    def _hess_exact(self, w):
        s = _sigmoid(self._X @ w)
        H = np.einsum("i,ij,ik->jk", self._p * s * (1 - s), self._X, self._X) + self.lam * np.eye(self.d)
        return 0.5 * (H + H.T)

    # -- Monte Carlo (continuous design) -------------------------------------
    def _covariate_chunks(self, stream, n):
        rng = SeededRng(self.seed, stream)
        left = n
        while left > 0:
            m = min(_CHUNK, left)
            Z = rng.normal((m, self.design.n_draws))
            X = self.design.covariates(Z)
            yield X, _sigmoid(X @ self.w_model)
            left -= m

    def _fit_anchor(self):
        n = self.anchor_samples

        def value(w):
            tot = 0.0
            for X, q in self._covariate_chunks(_ANCHOR_STREAM, n):
                a = X @ w
                tot += float(np.sum(np.logaddexp(0.0, a) - q * a))
            return tot / n + 0.5 * self.lam * (w @ w)

        def grad_hess(w):
            g = np.zeros(self.d)
            H = np.zeros((self.d, self.d))
            for X, q in self._covariate_chunks(_ANCHOR_STREAM, n):
                s = _sigmoid(X @ w)
                g += X.T @ (s - q)
                H += (X * (s * (1 - s))[:, None]).T @ X
            return g / n + self.lam * w, H / n + self.lam * np.eye(self.d)

        self.w_star, self.anchor_residual, _ = _newton(grad_hess, value, np.zeros(self.d), 1e-12)
        _, H = grad_hess(self.w_star)
        self.hessian_star = 0.5 * (H + H.T)

    def _mc(self, fn):
        """Monte Carlo mean of ``fn(X, q)`` (per-covariate values) over the evaluation set."""
        vals = [fn(X, q) for X, q in self._covariate_chunks(_EVAL_STREAM, self.eval_samples)]
        return _mean_se(np.concatenate(vals))

    # -- population -------------------------------------------------------------
    def population_value(self, w):
        w = as_vector(w, self.d, "w")
        if self.exact:
            return self._value_exact(w)
        reg = 0.5 * self.lam * (w @ w)
        est = self._mc(lambda X, q: np.logaddexp(0.0, X @ w) - q * (X @ w))
        return Estimate(est.value + reg, est.se)

    def population_gradient(self, w):
        w = as_vector(w, self.d, "w")
        if self.exact:
            return self._grad_exact(w)
        G = [(_sigmoid(X @ w) - q)[:, None] * X for X, q in self._covariate_chunks(_EVAL_STREAM, self.eval_samples)]
        G = np.concatenate(G)
        se = G.std(axis=0, ddof=1) / math.sqrt(G.shape[0])
        return Estimate(G.mean(axis=0) + self.lam * w, se)

    def population_hessian(self, w=None):
        if w is None:
            return self.hessian_star.copy()
        w = as_vector(w, self.d, "w")
        if self.exact:
            return self._hess_exact(w)
        H = np.zeros((self.d, self.d))
        for X, _ in self._covariate_chunks(_EVAL_STREAM, self.eval_samples):
            s = _sigmoid(X @ w)
            H += (X * (s * (1 - s))[:, None]).T @ X
        return H / self.eval_samples + self.lam * np.eye(self.d)

    def excess_risk(self, w):
        w = as_vector(w, self.d, "w")
        if self.exact:
            return self._value_exact(w) - self._value_exact(self.w_star)
        ws = self.w_star
        reg = 0.5 * self.lam * (w @ w - ws @ ws)

        def diff(X, q):
            a, b = X @ w, X @ ws
            return np.logaddexp(0.0, a) - np.logaddexp(0.0, b) - q * (a - b)

        est = self._mc(diff)
        return Estimate(est.value + reg, est.se)

    def smoothness(self):
        return 0.25 * self.design.sq_radius + self.lam

    def _per_x_sigma(self, X, q):
        """``E[|grad psi(w*)|^2_{H*^{-1}} | X]`` with the label integrated out."""
        ws = self.w_star
        C = psd_cholesky(self.hessian_star)
        s = _sigmoid(X @ ws)
        zx = solve_triangular(C, X.T, lower=True).T
        zw = solve_triangular(C, self.lam * ws, lower=True)
        out = np.zeros(X.shape[0])
        for label, prob in ((1.0, q), (0.0, 1.0 - q)):
            v = (s - label)[:, None] * zx + zw[None, :]
            out += prob * np.einsum("ij,ij->i", v, v)
        return out

    def sigma_squared(self):
        if self.exact:
            return 0.5 * float(self._p @ self._per_x_sigma(self._X, self._q))
        est = self._mc(self._per_x_sigma)
        return Estimate(0.5 * est.value, 0.5 * est.se)

    def alpha(self):
        """``lambda_max(H*) / lam``.

        Along any ray on which ``X.w`` is almost surely nonzero the data part of
        the Hessian vanishes at infinity, so the sup over ``w`` of
        ``lambda_max(H(w)^{-1/2} H* H(w)^{-1/2})`` is attained in that limit.
        """
        return float(np.linalg.eigvalsh(self.hessian_star)[-1] / self.lam)

    def kurtosis(self):
        if not self.exact:
            return estimate_kurtosis(self, SeededRng(self.seed, _KURTOSIS_STREAM))
        probs, X, y = self.outcomes()
        g = self.grad_batch(self.w_star, X, y)
        a = np.einsum("ij,ij->i", g, g)
        m2 = probs @ a
        return 1.0 if m2 == 0 else float((probs @ (a * a)) / m2**2)

    def self_concordance_M(self):
        """``alpha * E |X|^3_{H*^{-1}}``."""
        C = psd_cholesky(self.hessian_star)
        def cube(X, q=None):
            z = solve_triangular(C, X.T, lower=True)
            return np.sum(z * z, axis=0) ** 1.5

        if self.exact:
            return self.alpha() * float(self._p @ cube(self._X))
        est = self._mc(cube)
        a = self.alpha()
        return Estimate(a * est.value, a * est.se)

    def constants(self):
        L = self.smoothness()
        mu = self.lam
        sig = self.sigma_squared()
        kurt = self.kurtosis()
        M = self.self_concordance_M()
        est = {name for name, v in (("sigma_sq", sig), ("kurtosis", kurt), ("self_concordance_M", M)) if isinstance(v, Estimate)}
        if not self.exact:
            est.add("alpha")
        return ProblemConstants(
            mu=mu,
            L=L,
            kappa=L / mu,
            alpha=self.alpha(),
            sigma_sq=_value(sig),
            kurtosis=_value(kurt),
            self_concordance_M=_value(M),
            lam=self.lam,
            estimated=frozenset(est),
        )

    def to_config(self):
        return {
            "family": self.family,
            "d": self.d,
            "lambda": self.lam,
            "w_star": self.w_model.tolist(),
            "design": self.design.to_config(),
            "bias": {"kind": "none", "scale": 0.0},
            "seed": self.seed,
            "anchor_samples": self.anchor_samples,
            "eval_samples": self.eval_samples,
        }


# --------------------------------------------------------------------------- lemma oracles


class OracleResult(NamedTuple):
    """Inequality ``lhs <= rhs`` checked as ``lhs.value - 3 lhs.se <= rhs``."""

    lhs: Estimate
    rhs: float
    passed: bool


def _oracle(vals, rhs):
    lhs = _mean_se(vals)
    slack = 1e-12 * max(1.0, abs(rhs))
    return OracleResult(lhs, float(rhs), bool(lhs.value - 3.0 * lhs.se <= rhs + slack))


def lemma1_oracle(problem, w, rng, n=10**4):
    """``E |grad psi(w) - grad psi(w*)|^2 <= 2 L (P(w) - P(w*))`` by Monte Carlo."""
    w = as_vector(w, problem.d, "w")
    X, y = problem.sample_batch(rng, n)
    diff = problem.grad_batch(w, X, y) - problem.grad_batch(problem.w_star, X, y)
    rhs = 2.0 * problem.smoothness() * _value(problem.excess_risk(w))
    return _oracle(np.einsum("ij,ij->i", diff, diff), rhs)


def lemma2_oracle(problem, w, rng, n=10**4, constants=None):
    """``E |grad psi(w) - grad P(w)|^2_{H*^{-1}} <= 2 (sqrt(kappa (P(w) - P(w*))) + sigma)^2``.

    ``kappa`` is ``L / mu``; equality holds at ``w = w*``. Pass ``constants``
    to avoid recomputing ``problem.constants()`` per call.
    """
    w = as_vector(w, problem.d, "w")
    X, y = problem.sample_batch(rng, n)
    g = problem.grad_batch(w, X, y) - np.asarray(_vec_value(problem.population_gradient(w)))[None, :]
    C = psd_cholesky(problem.hessian_star)
    z = solve_triangular(C, g.T, lower=True)
    c = constants or problem.constants()
    excess = max(_value(problem.excess_risk(w)), 0.0)
    rhs = 2.0 * (math.sqrt(c.kappa * excess) + math.sqrt(c.sigma_sq)) ** 2
    return _oracle(np.sum(z * z, axis=0), rhs)


def hessian_bound_oracle(problem):
    """``(lambda_max(H*), 2 L, passed)`` for ``H* <= 2 L I``."""
    top = float(np.linalg.eigvalsh(problem.hessian_star)[-1])
    L = problem.smoothness()
    return top, 2.0 * L, bool(top <= 2.0 * L)


def _vec_value(v):
    return v.value if isinstance(v, Estimate) else v


# --------------------------------------------------------------------------- config

_LS_KEYS = {"family", "d", "sigma_noise", "noise", "lambda", "w_star", "design", "bias", "seed"}
_LOGISTIC_KEYS = {"family", "d", "sigma_noise", "lambda", "w_star", "design", "bias", "seed", "anchor_samples", "eval_samples"}


def problem_from_config(cfg):
    """Build a problem from a plain dict (the ``problem`` section of a config).

    Keys: ``family`` (``least_squares`` | ``logistic``), ``d``, ``sigma_noise``,
    ``noise``, ``lambda``, ``w_star``, ``design.{kind,radius,points,probs}``,
    ``bias.{kind,scale}``, ``seed``; logistic also accepts ``anchor_samples``
    and ``eval_samples``.
    """
    if not isinstance(cfg, dict):
        raise ConfigError("problem section must be a mapping", "problem")
    if "family" not in cfg:
        raise ConfigError("missing key: problem.family", "problem.family")
    family = cfg["family"]
    if family not in ("least_squares", "logistic"):
        raise ConfigError(f"unknown family {family!r}", "problem.family")
    _reject_unknown(cfg, _LS_KEYS if family == "least_squares" else _LOGISTIC_KEYS, "problem")
    if "d" not in cfg:
        raise ConfigError("missing key: problem.d", "problem.d")
    try:
        d = int(cfg["d"])
    except (TypeError, ValueError):
        raise ConfigError("problem.d must be an integer", "problem.d") from None
    if d < 1:
        raise ConfigError("problem.d must be >= 1", "problem.d")
    w = cfg.get("w_star")
    w = np.full(d, 1.0 / math.sqrt(d)) if w is None else np.asarray(w, dtype=np.float64)
    if w.shape != (d,):
        raise ConfigError(f"problem.w_star must have length {d}", "problem.w_star")
    design = design_from_config(cfg.get("design"), d)
    bias = dict(cfg.get("bias") or {})
    _reject_unknown(bias, {"kind", "scale"}, "problem.bias")
    bias_kind = bias.get("kind", "none")
    if bias_kind not in ("none", "quadratic"):
        raise ConfigError(f"unknown bias kind {bias_kind!r}", "problem.bias.kind")
    bias_scale = float(bias.get("scale", 0.0)) if bias_kind == "quadratic" else 0.0
    seed = int(cfg.get("seed", 0))
    if family == "least_squares":
        return LinearRegressionProblem(
            w,
            sigma_noise=float(cfg.get("sigma_noise", 1.0)),
            design=design,
            lam=float(cfg.get("lambda", 0.0)),
            bias_scale=bias_scale,
            noise=cfg.get("noise", "gaussian"),
            seed=seed,
        )
    if bias_scale:
        raise ConfigError("bias is only supported for least squares", "problem.bias.kind")
    return LogisticRegressionProblem(
        w,
        design=design,
        lam=float(cfg.get("lambda", 0.1)),
        seed=seed,
        anchor_samples=int(cfg.get("anchor_samples", 10**7)),
        eval_samples=int(cfg.get("eval_samples", 10**6)),
    )
