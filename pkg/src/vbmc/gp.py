"""Gaussian-process surrogate of the log joint.

Squared-exponential kernel, negative-quadratic mean, heteroskedastic
Gaussian observation noise with a learned base noise floor, MAP and
slice-sampling hyperparameter inference, and closed-form posterior
prediction including the rank-1 variance-after-observation update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize

from vbmc.sampling import slice_sweep

SIGMA_MIN_SQ = 1e-5  # floor on user-supplied observation noise variance
_DUPLICATE_TOL = 1e-12
_JITTER_BASE = 1e-10
_JITTER_MAX = 1e-4


class StateError(RuntimeError):
    """Raised when an operation is invoked on an unready model."""


# ---------------------------------------------------------------------------
# Training data


class TrainingSet:
    """Evaluated inputs with noisy log-joint values and per-point noise SDs.

    Points within 1e-12 (relative) of an existing row are merged by
    precision weighting instead of being appended.
    """

    def __init__(self, D: int):
        self.D = int(D)
        self.points = np.empty((0, D))
        self.values = np.empty(0)
        self.noise_sd = np.empty(0)

    def __len__(self) -> int:
        return self.points.shape[0]

    def add(self, theta, y: float, noise_sd: float) -> bool:
        """Insert an observation; returns True if merged into an existing row."""
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.D,) or not np.all(np.isfinite(theta)):
            raise ValueError("bad training point")
        if not np.isfinite(y):
            raise ValueError("non-finite training value")
        sd = float(max(noise_sd, np.sqrt(SIGMA_MIN_SQ)))
        n = len(self)
        if n > 0:
            scale = max(1.0, float(np.max(np.abs(self.points))))
            d = np.max(np.abs(self.points - theta), axis=1)
            j = int(np.argmin(d))
            if d[j] <= _DUPLICATE_TOL * scale:
                w_old = 1.0 / self.noise_sd[j] ** 2
                w_new = 1.0 / sd**2
                self.values[j] = (w_old * self.values[j] + w_new * y) / (w_old + w_new)
                self.noise_sd[j] = max(np.sqrt(1.0 / (w_old + w_new)),
                                       np.sqrt(SIGMA_MIN_SQ))
                return True
        self.points = np.vstack([self.points, theta[None, :]])
        self.values = np.append(self.values, float(y))
        self.noise_sd = np.append(self.noise_sd, sd)
        return False

    def copy(self) -> "TrainingSet":
        out = TrainingSet(self.D)
        out.points = self.points.copy()
        out.values = self.values.copy()
        out.noise_sd = self.noise_sd.copy()
        return out

    def shifted(self, dy: float) -> "TrainingSet":
        """Copy with all values shifted by a constant (space remap)."""
        out = self.copy()
        out.values = out.values + dy
        return out


# ---------------------------------------------------------------------------
# Hyperparameters

@dataclass(frozen=True)
class GpHyperparams:
    """View over the packed hyperparameter vector of length 3D+3.

    Layout: ``[log_ell (D), log_sf, log_snbase, m0, theta_m (D), log_omega (D)]``.
    """

    vec: np.ndarray

    @property
    def D(self) -> int:
        return (self.vec.size - 3) // 3

    @property
    def ell(self) -> np.ndarray:
        return np.exp(self.vec[: self.D])

    @property
    def sf2(self) -> float:
        return float(np.exp(2.0 * self.vec[self.D]))

    @property
    def noise_base_var(self) -> float:
        return float(np.exp(2.0 * self.vec[self.D + 1]))

    @property
    def m0(self) -> float:
        return float(self.vec[self.D + 2])

    @property
    def theta_m(self) -> np.ndarray:
        D = self.D
        return self.vec[D + 3 : 2 * D + 3]

    @property
    def omega(self) -> np.ndarray:
        D = self.D
        # An overflowing scale is a valid flat-mean limit; inf is fine.
        with np.errstate(over="ignore"):
            return np.exp(self.vec[2 * D + 3 :])


def n_hyperparams(D: int) -> int:
    return 3 * D + 3


def kernel(theta, theta_p, psi: GpHyperparams) -> float:
    """Squared-exponential kernel; equals sf^2 at zero distance."""
    d = (np.asarray(theta, float) - np.asarray(theta_p, float)) / psi.ell
    return psi.sf2 * float(np.exp(-0.5 * np.dot(d, d)))


def kernel_matrix(A, B, psi: GpHyperparams) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, float)) / psi.ell
    B = np.atleast_2d(np.asarray(B, float)) / psi.ell
    sq = (np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :]
          - 2.0 * A @ B.T)
    return psi.sf2 * np.exp(-0.5 * np.maximum(sq, 0.0))


def mean_fn(theta, psi: GpHyperparams):
    """Negative quadratic mean function, maximum m0 at theta_m."""
    theta = np.atleast_2d(np.asarray(theta, float))
    with np.errstate(over="ignore"):
        d = (theta - psi.theta_m) / psi.omega
        out = psi.m0 - 0.5 * np.sum(d**2, axis=1)
    return out if out.size > 1 else float(out[0])


# ---------------------------------------------------------------------------
# Hyperprior (truncated Student-t, nu=3, on scale-type hyperparameters)

_T_NU = 3.0
_T_TRUNC = 10.0  # truncation at +/- 10 prior scales


@dataclass(frozen=True)
class HyperPrior:
    """Independent priors over the packed hyperparameter vector.

    ``mask`` flags coordinates with a truncated Student-t prior; the
    rest are uniform and contribute zero inside the support.  ``lo`` and
    ``hi``, when set, truncate every coordinate to a hard box so the
    hyperparameter posterior is always proper.
    """

    mu: np.ndarray
    sigma: np.ndarray
    mask: np.ndarray
    lo: np.ndarray = None
    hi: np.ndarray = None

    @classmethod
    def default(cls, D: int, plausible_ranges) -> "HyperPrior":
        L = np.broadcast_to(np.asarray(plausible_ranges, float), (D,))
        n = n_hyperparams(D)
        mu = np.zeros(n)
        sigma = np.ones(n)
        mask = np.zeros(n, dtype=bool)
        mu[:D] = np.log(np.sqrt(D / 6.0) * L)
        sigma[:D] = np.log(np.sqrt(1e3))
        mask[:D] = True
        mu[D + 1] = np.log(np.sqrt(SIGMA_MIN_SQ))
        sigma[D + 1] = 0.5
        mask[D + 1] = True
        return cls(mu=mu, sigma=sigma, mask=mask)

    @classmethod
    def uniform(cls, D: int) -> "HyperPrior":
        """Fully improper prior: every coordinate unconstrained."""
        n = n_hyperparams(D)
        return cls(mu=np.zeros(n), sigma=np.ones(n),
                   mask=np.zeros(n, dtype=bool))

    def with_box(self, lo, hi) -> "HyperPrior":
        return HyperPrior(mu=self.mu, sigma=self.sigma, mask=self.mask,
                          lo=np.asarray(lo, float), hi=np.asarray(hi, float))

    def logpdf_and_grad(self, vec: np.ndarray):
        if self.lo is not None and (np.any(vec < self.lo)
                                    or np.any(vec > self.hi)):
            return -np.inf, np.zeros_like(vec)
        t = (vec[self.mask] - self.mu[self.mask]) / self.sigma[self.mask]
        if np.any(np.abs(t) > _T_TRUNC):
            return -np.inf, np.zeros_like(vec)
        val = float(np.sum(-0.5 * (_T_NU + 1.0) * np.log1p(t**2 / _T_NU)))
        grad = np.zeros_like(vec)
        grad[self.mask] = (-(_T_NU + 1.0) * t / (_T_NU + t**2)) / self.sigma[self.mask]
        return val, grad

    def sample(self, rng: np.random.Generator, center: np.ndarray) -> np.ndarray:
        """Draw a start point: prior draw where proper, jittered center elsewhere."""
        vec = center + 0.1 * rng.standard_normal(center.size)
        vec[self.mask] = (self.mu[self.mask]
                         + 0.5 * self.sigma[self.mask]
                         * rng.standard_t(_T_NU, size=int(np.sum(self.mask))))
        return vec


# ---------------------------------------------------------------------------
# Marginal likelihood + gradient


def _observed_cov(training: TrainingSet, psi: GpHyperparams, jitter_frac):
    K = kernel_matrix(training.points, training.points, psi)
    noise = psi.noise_base_var + training.noise_sd**2
    jitter = jitter_frac * psi.sf2
    return K, K + np.diag(noise) + jitter * np.eye(len(training))


def gp_log_posterior_hyp(training: TrainingSet, psi_vec, prior: HyperPrior,
                         jitter_frac: float = _JITTER_BASE):
    """Log marginal likelihood plus log hyperprior, with exact gradient.

    Returns ``(-inf, zeros)`` for rejected states (outside prior
    truncation, or covariance not positive definite after jitter).
    """
    psi_vec = np.asarray(psi_vec, dtype=float)
    if not np.all(np.isfinite(psi_vec)):
        return -np.inf, np.zeros_like(psi_vec)
    prior_val, grad = prior.logpdf_and_grad(psi_vec)
    if not np.isfinite(prior_val):
        return -np.inf, np.zeros_like(psi_vec)
    psi = GpHyperparams(psi_vec)
    N = len(training)
    D = training.D
    if N == 0:
        return prior_val, grad

    with np.errstate(over="ignore"):
        K, A = _observed_cov(training, psi, jitter_frac)
    if not np.all(np.isfinite(A)):
        return -np.inf, np.zeros_like(psi_vec)
    try:
        cf = cho_factor(A, lower=True)
    except np.linalg.LinAlgError:
        return -np.inf, np.zeros_like(psi_vec)
    r = training.values - np.atleast_1d(mean_fn(training.points, psi))
    if not np.all(np.isfinite(r)):
        return -np.inf, np.zeros_like(psi_vec)
    alpha = cho_solve(cf, r)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    val = prior_val - 0.5 * (r @ alpha) - 0.5 * logdet - 0.5 * N * np.log(2 * np.pi)

    Ainv = cho_solve(cf, np.eye(N))
    M = np.outer(alpha, alpha) - Ainv  # d(loglik)/dA = M/2

    X = training.points
    # Kernel hyperparameters.
    for i in range(D):
        D2 = (X[:, i][:, None] - X[:, i][None, :]) ** 2 / psi.ell[i] ** 2
        grad[i] += 0.5 * np.sum(M * (K * D2))
    jit = jitter_frac * psi.sf2
    grad[D] += 0.5 * np.sum(M * (2.0 * (K + jit * np.eye(N))))
    grad[D + 1] += 0.5 * np.trace(M) * 2.0 * psi.noise_base_var
    # Mean-function hyperparameters: d(loglik)/dm = alpha.
    with np.errstate(over="ignore"):
        dm = (X - psi.theta_m) / psi.omega**2
    grad[D + 2] += np.sum(alpha)
    grad[D + 3 : 2 * D + 3] += dm.T @ alpha
    grad[2 * D + 3 :] += (dm * (X - psi.theta_m)).T @ alpha
    return val, grad


# ---------------------------------------------------------------------------
# Fitted model


@dataclass
class _SampleCache:
    psi: GpHyperparams
    chol: np.ndarray  # lower Cholesky of K + noise + jitter
    alpha: np.ndarray  # (K + noise + jitter)^-1 (y - m)
    jitter_var: float


@dataclass
class GpModel:
    """GP conditioned on a training set, for one or more hyperparameter samples."""

    training: TrainingSet
    samples: list[_SampleCache]
    negative_var_count: int = field(default=0)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def psi_vectors(self) -> np.ndarray:
        return np.array([c.psi.vec for c in self.samples])

    def mean_lengthscales(self) -> np.ndarray:
        """Geometric mean of input length scales across samples."""
        logs = np.array([np.log(c.psi.ell) for c in self.samples])
        return np.exp(np.mean(logs, axis=0))

    def _check(self):
        if not self.samples:
            raise StateError("model has no fitted hyperparameter samples")

    def posterior(self, theta_star, full_cov: bool = False):
        """Latent posterior mean and variance at query points.

        Returns per-sample arrays of shape (S, M); with ``full_cov``
        also the per-sample cross-covariance rows ``C(theta*, Theta)``
        of shape (S, M, N).
        """
        self._check()
        Ts = np.atleast_2d(np.asarray(theta_star, float))
        S, M = self.n_samples, Ts.shape[0]
        means = np.empty((S, M))
        vars_ = np.empty((S, M))
        cross = np.empty((S, M, len(self.training))) if full_cov else None
        for s, c in enumerate(self.samples):
            psi = c.psi
            prior_var = psi.sf2 + c.jitter_var
            m_star = np.atleast_1d(mean_fn(Ts, psi))
            if len(self.training) == 0:
                means[s] = m_star
                vars_[s] = prior_var
                continue
            Ks = kernel_matrix(Ts, self.training.points, psi)  # (M, N)
            means[s] = m_star + Ks @ c.alpha
            V = solve_triangular(c.chol, Ks.T, lower=True)  # (N, M)
            vars_[s] = prior_var - np.sum(V**2, axis=0)
            if full_cov:
                cross[s] = Ks
        neg = vars_ < 0
        if np.any(vars_ < -1e-12 * np.array([[c.psi.sf2] for c in self.samples])):
            self.negative_var_count += int(np.sum(neg))
        np.clip(vars_, 0.0, None, out=vars_)
        if full_cov:
            return means, vars_, cross
        return means, vars_

    def posterior_mean_var(self, theta_star):
        """Mixture mean and variance across hyperparameter samples, shape (M,)."""
        means, vars_ = self.posterior(theta_star)
        mix_mean = means.mean(axis=0)
        mix_var = vars_.mean(axis=0) + means.var(axis=0)
        return mix_mean, mix_var

    def cross_cov(self, theta, theta_star):
        """Per-sample latent posterior covariance C(theta_i, theta*), shape (S, M)."""
        self._check()
        T = np.atleast_2d(np.asarray(theta, float))
        ts = np.atleast_1d(np.asarray(theta_star, float))
        S = self.n_samples
        out = np.empty((S, T.shape[0]))
        for s, c in enumerate(self.samples):
            k_direct = kernel_matrix(T, ts[None, :], c.psi)[:, 0]
            if len(self.training) == 0:
                out[s] = k_direct
                continue
            Kt = kernel_matrix(T, self.training.points, c.psi)
            ks = kernel_matrix(ts[None, :], self.training.points, c.psi)[0]
            v = solve_triangular(c.chol, ks, lower=True)
            Vt = solve_triangular(c.chol, Kt.T, lower=True)
            out[s] = k_direct - Vt.T @ v
        return out

    def predictive_var_after(self, theta, theta_star, noise_sd_star,
                             per_sample: bool = False):
        """Rank-1 predicted latent variance at ``theta`` after observing
        ``theta_star`` with noise SD ``noise_sd_star``.

        Vectorized over ``theta`` (M points); averaged across
        hyperparameter samples unless ``per_sample``.
        """
        self._check()
        T = np.atleast_2d(np.asarray(theta, float))
        _, s2, _ = self.posterior(T, full_cov=True)
        c_tstar = self.cross_cov(T, theta_star)  # (S, M)
        out = np.empty_like(s2)
        for s, c in enumerate(self.samples):
            c_ss = self.cross_cov(np.atleast_2d(theta_star), theta_star)[s, 0]
            # Base noise belongs to the prospective observation's total
            # noise, matching a full refit that includes the new point.
            denom = c_ss + c.psi.noise_base_var + float(noise_sd_star) ** 2
            out[s] = s2[s] - c_tstar[s] ** 2 / denom
        np.clip(out, 0.0, None, out=out)
        if per_sample:
            return out
        return out.mean(axis=0)


# ---------------------------------------------------------------------------
# Fitting


def _heuristic_psi(training: TrainingSet, prior: HyperPrior) -> np.ndarray:
    D = training.D
    vec = np.zeros(n_hyperparams(D))
    vec[:D] = prior.mu[:D]
    spread = float(np.std(training.values)) if len(training) > 1 else 1.0
    vec[D] = np.log(max(spread, 1e-3))
    vec[D + 1] = prior.mu[D + 1]
    vec[D + 2] = float(np.max(training.values))
    best = training.points[int(np.argmax(training.values))]
    vec[D + 3 : 2 * D + 3] = best
    vec[2 * D + 3 :] = prior.mu[:D] + np.log(np.sqrt(6.0 / D))
    return vec


def _factorize(training: TrainingSet, psi: GpHyperparams):
    """Cholesky with escalating jitter; returns cache or None if rejected."""
    jf = _JITTER_BASE
    while jf <= _JITTER_MAX:
        _, A = _observed_cov(training, psi, jf)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            jf *= 2.0
            continue
        r = training.values - np.atleast_1d(mean_fn(training.points, psi))
        alpha = solve_triangular(
            L.T, solve_triangular(L, r, lower=True), lower=False)
        return _SampleCache(psi=psi, chol=L, alpha=alpha,
                            jitter_var=jf * psi.sf2)
    return None


def fit_gp(training: TrainingSet, mode: str, rng: np.random.Generator,
           plausible_ranges, n_mcmc: int = 8, n_starts: int = 3,
           init_psi=None, max_iter: int = 200) -> GpModel:
    """Fit GP hyperparameters by MAP optimization or slice-sampling MCMC.

    Parameters
    ----------
    mode : {"map", "mcmc"}
    plausible_ranges : array-like, shape (D,)
        Plausible range per coordinate in the current inference space;
        sets the hyperprior location for the input length scales.
    init_psi : array-like, optional
        Warm start (e.g. the previous iteration's optimum).
    """
    if len(training) < 2:
        raise StateError("need at least 2 training points to fit a GP")
    D = training.D
    prior = HyperPrior.default(D, plausible_ranges)

    # Truncate every hyperparameter to a generous data-driven box so the
    # posterior is proper even where the prior density is flat.
    n = n_hyperparams(D)
    lo, hi = np.full(n, -np.inf), np.full(n, np.inf)
    lo[prior.mask] = prior.mu[prior.mask] - _T_TRUNC * prior.sigma[prior.mask]
    hi[prior.mask] = prior.mu[prior.mask] + _T_TRUNC * prior.sigma[prior.mask]
    y_lo, y_hi = float(np.min(training.values)), float(np.max(training.values))
    y_rng = max(y_hi - y_lo, 1.0)
    lo[D], hi[D] = np.log(y_rng) - 15.0, np.log(y_rng) + 5.0  # log sf
    lo[D + 2], hi[D + 2] = y_lo - 10.0 * y_rng, y_hi + 10.0 * y_rng  # m0
    p_lo = training.points.min(axis=0)
    p_hi = training.points.max(axis=0)
    p_rng = np.maximum(p_hi - p_lo, 1e-3)
    lo[D + 3 : 2 * D + 3] = p_lo - 5.0 * p_rng  # theta_m
    hi[D + 3 : 2 * D + 3] = p_hi + 5.0 * p_rng
    lo[2 * D + 3 :] = np.log(p_rng) - 6.0  # log omega
    hi[2 * D + 3 :] = np.log(p_rng) + 8.0
    prior = prior.with_box(lo, hi)

    def objective(vec):
        val, grad = gp_log_posterior_hyp(training, vec, prior)
        if not np.isfinite(val):
            return 1e100, np.zeros_like(vec)
        return -val, -grad

    starts = []
    if init_psi is not None:
        starts.append(np.asarray(init_psi, dtype=float))
    starts.append(_heuristic_psi(training, prior))
    center = starts[-1]
    while len(starts) < max(n_starts, 1):
        cand = prior.sample(rng, center)
        # Keep the data-driven mean/output-scale entries for stability.
        cand[D:] = center[D:] + 0.3 * rng.standard_normal(center.size - D)
        starts.append(cand)
    margin = 1e-6 * np.maximum(np.abs(lo) + np.abs(hi), 1.0)
    starts = [np.clip(s, lo + margin, hi - margin) for s in starts]

    best_vec, best_val = None, np.inf
    diagnostics = []
    for x0 in starts:
        try:
            res = minimize(objective, x0, jac=True, method="L-BFGS-B",
                           bounds=list(zip(lo + margin, hi - margin)),
                           options={"maxiter": max_iter})
        except (np.linalg.LinAlgError, ValueError) as err:  # pragma: no cover
            diagnostics.append(str(err))
            continue
        if np.isfinite(res.fun) and res.fun < best_val:
            best_val, best_vec = res.fun, res.x
    if best_vec is None:
        raise StateError(f"all MAP starts failed: {diagnostics}")

    if mode == "map":
        vectors = [best_vec]
    elif mode == "mcmc":
        widths = np.minimum(np.where(prior.mask, prior.sigma, 1.0),
                            0.1 * (hi - lo))
        # One full sweep is 3D+3 univariate updates; keep one draw every
        # 3 sweeps, i.e. 3*(3D+3) univariate slice updates per sample.
        thin = 3
        x = best_vec.copy()
        lp, _ = gp_log_posterior_hyp(training, x, prior)

        def log_target(v):
            val, _ = gp_log_posterior_hyp(training, v, prior)
            return val

        vectors = []
        for _ in range(5):  # burn-in
            x, lp = slice_sweep(x, log_target, widths, rng, log_px=lp)
        for _ in range(n_mcmc):
            for _ in range(thin):
                x, lp = slice_sweep(x, log_target, widths, rng, log_px=lp)
            vectors.append(x.copy())
    else:
        raise ValueError(f"unknown fit mode {mode!r}")

    caches = []
    for vec in vectors:
        cache = _factorize(training, GpHyperparams(vec))
        if cache is not None:
            caches.append(cache)
    if not caches:
        raise StateError("no hyperparameter sample produced a PD covariance")
    return GpModel(training=training, samples=caches)
