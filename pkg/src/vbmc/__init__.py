"""Variational Bayesian Monte Carlo with support for noisy log-likelihood evaluations.

Posterior and model-evidence estimation for expensive, black-box,
possibly noisy log-likelihoods, using a Gaussian-process surrogate,
Bayesian quadrature and noise-robust acquisition functions.
"""

from vbmc.spaces import ParamSpace
from vbmc.gp import TrainingSet, GpHyperparams, GpModel, fit_gp
from vbmc.variational import VariationalPosterior
from vbmc.quadrature import ElboEstimate, elbo, expected_log_joint, optimize_vp
from vbmc.engine import EngineOptions, IterationRecord, run_vbmc

__all__ = [
    "ParamSpace",
    "TrainingSet",
    "GpHyperparams",
    "GpModel",
    "fit_gp",
    "VariationalPosterior",
    "ElboEstimate",
    "elbo",
    "expected_log_joint",
    "optimize_vp",
    "EngineOptions",
    "IterationRecord",
    "run_vbmc",
]

__version__ = "0.1.0"
