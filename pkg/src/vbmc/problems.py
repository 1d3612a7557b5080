"""Benchmark problems: banana, Ricker population model, g-and-k quantile
distribution.

Each problem bundles a parameter space, a noisy-target factory, and
(when shipped) a precomputed ground-truth bundle with the log marginal
likelihood, posterior moments, and marginal densities in the original
parameter space.  All problems use a uniform prior over the hard box, so
the log joint is the log likelihood plus a constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources

import numpy as np
from scipy.stats import norm

from vbmc.spaces import DomainError, ParamSpace
from vbmc.targets import NoisyEvaluation, emulated_noisy, synthetic_loglik

PROBLEM_NAMES = ("banana", "ricker", "gandk")

GANDK_C = 0.8

RICKER_THETA_TRUE = np.array([3.8, 10.0, 0.3])
RICKER_T = 50
RICKER_BOUNDS = dict(lb=(3.0, 4.0, 0.0), ub=(5.0, 20.0, 0.8),
                     plb=(3.2, 5.6, 0.08), pub=(4.8, 18.4, 0.72))

GANDK_THETA_TRUE = np.array([3.0, 1.0, 2.0, 0.5])
GANDK_N_DATA = 1000
GANDK_BOUNDS = dict(lb=(2.5, 0.5, 1.5, 0.3), ub=(3.5, 1.5, 2.5, 0.7),
                    plb=(2.6, 0.6, 1.6, 0.34), pub=(3.4, 1.4, 2.4, 0.66))

BANANA_BOUNDS = dict(lb=(-5.0, -5.0), ub=(5.0, 5.0),
                     plb=(-2.5, -1.0), pub=(2.5, 4.9))


# ---------------------------------------------------------------------------
# Banana


def banana_logpdf(theta) -> float:
    """Curved two-dimensional density: theta_2 tracks theta_1 squared."""
    theta = np.asarray(theta, float)
    t1, t2 = theta[..., 0], theta[..., 1]
    return (norm.logpdf(t1, 0.0, 1.0)
            + norm.logpdf(t2 - t1**2, 0.0, 0.5))


# ---------------------------------------------------------------------------
# Ricker population model


def ricker_simulate(theta, T: int = RICKER_T, n_rep: int = 1,
                    rng: np.random.Generator = None) -> np.ndarray:
    """Simulate observed counts from the stochastic Ricker map.

    The latent population is propagated in log space,
    ``l_{t+1} = log r + l_t - exp(l_t) + e_t`` with
    ``e_t ~ N(0, sd^2)`` and ``l_0 = 0``; observations are
    ``z_t ~ Poisson(phi * exp(l_t))``.  Returns an (n_rep, T) integer
    array.
    """
    log_r, phi, sd = np.asarray(theta, float)
    rng = rng or np.random.default_rng()
    l = np.zeros(n_rep)
    z = np.empty((n_rep, T), dtype=np.int64)
    for t in range(T):
        l = log_r + l - np.exp(l) + sd * rng.standard_normal(n_rep)
        lam = np.minimum(phi * np.exp(np.minimum(l, 30.0)), 1e9)
        z[:, t] = rng.poisson(lam)
    return z


def ricker_summaries(z) -> np.ndarray:
    """Thirteen summary statistics of a Ricker observation series.

    Per series: mean; number of zeros; autocovariances at lags 1-5; the
    three non-constant coefficients of a cubic fitted to the sorted
    one-step differences against a fixed [-1, 1] abscissa; and the three
    coefficients (intercept included) of the regression of
    ``z_{t+1}^0.3`` on ``(z_t^0.3, z_t^0.6)``.
    """
    z = np.atleast_2d(np.asarray(z, float))
    n, T = z.shape
    out = np.empty((n, 13))
    out[:, 0] = z.mean(axis=1)
    out[:, 1] = np.sum(z == 0, axis=1)
    zc = z - z.mean(axis=1, keepdims=True)
    for lag in range(1, 6):
        out[:, 1 + lag] = np.sum(zc[:, lag:] * zc[:, :-lag], axis=1) / T
    x = np.linspace(-1.0, 1.0, T - 1)
    Xc = np.column_stack([np.ones(T - 1), x, x**2, x**3])
    diffs = np.sort(np.diff(z, axis=1), axis=1)
    coef, *_ = np.linalg.lstsq(Xc, diffs.T, rcond=None)
    out[:, 7:10] = coef[1:].T
    a = z[:, :-1] ** 0.3
    b = z[:, 1:] ** 0.3
    X = np.stack([np.ones_like(a), a, a**2], axis=2)  # (n, T-1, 3)
    G = np.einsum("nti,ntj->nij", X, X)
    G += 1e-9 * np.eye(3)  # keeps degenerate series (e.g. all zeros) solvable
    c = np.einsum("nti,nt->ni", X, b)
    out[:, 10:13] = np.linalg.solve(G, c[..., None])[..., 0]
    return out


# ---------------------------------------------------------------------------
# g-and-k distribution


def gandk_quantile(p, theta, c: float = GANDK_C) -> np.ndarray:
    """Quantile function of the g-and-k distribution."""
    a, b, g, k = np.asarray(theta, float)
    x = norm.ppf(np.asarray(p, float))
    return _gandk_from_normal(x, a, b, g, k, c)


def _gandk_from_normal(x, a, b, g, k, c=GANDK_C):
    e = np.exp(-g * x)
    return a + b * (1.0 + c * (1.0 - e) / (1.0 + e)) * (1.0 + x**2) ** k * x


def gandk_simulate(theta, n_data: int, n_rep: int = 1,
                   rng: np.random.Generator = None) -> np.ndarray:
    """Draw (n_rep, n_data) samples by transforming standard normals."""
    a, b, g, k = np.asarray(theta, float)
    rng = rng or np.random.default_rng()
    x = rng.standard_normal((n_rep, n_data))
    return _gandk_from_normal(x, a, b, g, k)


def gandk_summaries(samples) -> np.ndarray:
    """Four octile-based summaries: median, spread, skewness, kurtosis."""
    s = np.atleast_2d(np.asarray(samples, float))
    E = np.percentile(s, [12.5, 25, 37.5, 50, 62.5, 75, 87.5], axis=1)
    E1, E2, E3, E4, E5, E6, E7 = E
    spread = E6 - E2
    spread = np.maximum(spread, 1e-12)
    return np.column_stack([
        E4, spread, (E6 + E2 - 2 * E4) / spread,
        (E7 - E5 + E3 - E1) / spread,
    ])


# ---------------------------------------------------------------------------
# Problem registry


@dataclass
class BenchmarkProblem:
    """A benchmark target: space, noisy-evaluation factory, ground truth."""

    name: str
    space: ParamSpace
    observed: np.ndarray
    truth: dict
    n_sim_default: int = 100

    @property
    def log_prior_const(self) -> float:
        return -float(np.sum(np.log(self.space.ub - self.space.lb)))

    def make_target(self, rng: np.random.Generator, n_sim: int = None,
                    sigma_obs: float = 1.0, sigma_sigma: float = 0.0):
        """Callable mapping an original-space point to a noisy log-joint
        evaluation."""
        if self.name == "banana":
            def log_joint(x):
                return banana_logpdf(x) + self.log_prior_const
            return emulated_noisy(log_joint, sigma_obs, sigma_sigma, rng)

        n_sim = n_sim or self.n_sim_default
        obs_summ = self._summaries(self.observed[None, :])[0]

        def simulate_summaries(theta, n, local_rng):
            return self._summaries(self._simulate(theta, n, local_rng))

        def evaluate(x) -> NoisyEvaluation:
            ev = synthetic_loglik(obs_summ, simulate_summaries, x,
                                  n_sim, rng)
            if ev.failed:
                return ev
            return NoisyEvaluation(ev.y + self.log_prior_const,
                                   ev.sigma_est, ev.wall_time)

        return evaluate

    def _simulate(self, theta, n, rng):
        if self.name == "ricker":
            return ricker_simulate(theta, T=self.observed.size,
                                   n_rep=n, rng=rng)
        return gandk_simulate(theta, n_data=self.observed.size,
                              n_rep=n, rng=rng)

    def _summaries(self, data):
        if self.name == "ricker":
            return ricker_summaries(data)
        return gandk_summaries(data)


def _load_json(fname: str):
    path = resources.files("vbmc").joinpath("data", fname)
    if not path.is_file():
        return None
    return json.loads(path.read_text())


def get_problem(name: str) -> BenchmarkProblem:
    """Load a named benchmark problem with its shipped dataset and,
    when available, ground-truth bundle."""
    if name == "banana":
        space = ParamSpace(**{k: np.array(v)
                              for k, v in BANANA_BOUNDS.items()})
        return BenchmarkProblem("banana", space, observed=np.empty(0),
                                truth=_load_json("truth_banana.json"))
    if name == "ricker":
        space = ParamSpace(**{k: np.array(v)
                              for k, v in RICKER_BOUNDS.items()})
        data = _load_json("ricker_data.json")
        obs = np.asarray(data["observed"], float)
        return BenchmarkProblem("ricker", space, observed=obs,
                                truth=_load_json("truth_ricker.json"))
    if name == "gandk":
        space = ParamSpace(**{k: np.array(v)
                              for k, v in GANDK_BOUNDS.items()})
        data = _load_json("gandk_data.json")
        obs = np.asarray(data["observed"], float)
        return BenchmarkProblem("gandk", space, observed=obs,
                                truth=_load_json("truth_gandk.json"))
    raise DomainError(f"unknown problem {name!r}; "
                      f"choose from {PROBLEM_NAMES}")
