"""Streaming SVRG: single-pass estimation at the ERM rate.

The hot loops live in a compiled extension with a pure-Python fallback;
``streamsvrg.kernels.BACKEND`` reports which one is active.
"""

from .baselines import Constant, PolynomialDecay, SgdConfig, erm, erm_logistic, erm_ridge, sgd_run
from .core import NotPositiveDefiniteError, SeededRng, cholesky_solve, inv_m_norm_sq, m_norm_sq
from .kernels import BACKEND
from .objectives import (
    ConfigError,
    Estimate,
    FiniteDesign,
    GaussianDesign,
    LinearRegressionProblem,
    LogisticRegressionProblem,
    LossSample,
    ProblemConstants,
    SphereDesign,
    problem_from_config,
)
from .svrg import (
    RunTrace,
    SvrgSchedule,
    run,
    run_stage,
    schedule_corollary1,
    schedule_corollary2,
    schedule_factorial,
    schedule_practical,
)

from .analysis import competitive_ratio, initial_error_decay_probe

__version__ = "0.1.0"
