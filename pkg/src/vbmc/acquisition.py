"""Acquisition functions for active sampling with noisy evaluations.

Point-wise uncertainty sampling (PRO, NPRO), expected information gain
(EIG), and the integrated interquantile-range criteria (IMIQR, VIQR).
The integrated criteria are evaluated as the nonnegative *reduction* in
the integrated quantity relative to the no-observation baseline; this
preserves the argmax and interacts correctly with the multiplicative
regularizers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import norm

from vbmc.gp import GpModel, StateError, TrainingSet, kernel_matrix
from vbmc.quadrature import _mix_z, _per_sample_G
from vbmc.spaces import ParamSpace
from vbmc.variational import VariationalPosterior

ACQ_KINDS = ("pro", "npro", "eig", "imiqr", "viqr")

P_U = 0.75
V_REG = 1e-4
BOUND_EPS = 1e-5


def estimate_noise_at(training: TrainingSet, ell_bar, theta_star):
    """Noise SD at an arbitrary point via nearest neighbor in the
    length-scale-rescaled metric."""
    if len(training) == 0:
        raise StateError("cannot estimate noise with an empty training set")
    ts = np.atleast_2d(np.asarray(theta_star, float))
    d2 = np.sum(((ts[:, None, :] - training.points[None, :, :])
                 / np.asarray(ell_bar, float)) ** 2, axis=2)
    out = training.noise_sd[np.argmin(d2, axis=1)]
    return out if np.ndim(theta_star) > 1 else float(out[0])


@dataclass
class AcquisitionState:
    """Frozen context for one active-sampling step.

    The VIQR/IMIQR sample caches are drawn once at construction and kept
    fixed during the acquisition optimization, so the objective is
    deterministic.
    """

    gp: GpModel
    vp: VariationalPosterior
    space: ParamSpace
    u: float = field(default_factory=lambda: float(norm.ppf(P_U)))
    n_viqr: int = 100
    n_imiqr: int = 400
    viqr_cache: np.ndarray = None
    imiqr_cache: np.ndarray = None
    imiqr_weights: np.ndarray = None
    imiqr_degenerate: bool = False
    ell_bar: np.ndarray = None
    excluded: list = field(default_factory=list)

    @classmethod
    def create(cls, gp: GpModel, vp: VariationalPosterior, space: ParamSpace,
               rng: np.random.Generator, n_viqr: int = 100,
               n_imiqr: int = 400, kind: str = "viqr") -> "AcquisitionState":
        state = cls(gp=gp, vp=vp, space=space, n_viqr=n_viqr, n_imiqr=n_imiqr)
        state.ell_bar = gp.mean_lengthscales()
        state.viqr_cache = vp.sample(n_viqr, rng)
        state._precompute_cache("viqr")
        if kind == "imiqr":
            state.imiqr_cache = vp.sample(n_imiqr, rng)
            fbar, _ = gp.posterior_mean_var(state.imiqr_cache)
            logw = fbar - vp.log_pdf(state.imiqr_cache)
            logw = logw - np.max(logw)
            w = np.exp(logw)
            tot = w.sum()
            if not np.isfinite(tot) or tot <= 0:
                state.imiqr_degenerate = True
            else:
                w = w / tot
                # Guard against importance-weight collapse.
                if 1.0 / np.sum(w**2) < 2.0:
                    state.imiqr_degenerate = True
            if state.imiqr_degenerate:
                w = np.full(n_imiqr, 1.0 / n_imiqr)
            state.imiqr_weights = w
            state._precompute_cache("imiqr")
        return state

    # -- cached per-GP-sample quantities over the integration samples ------

    def _precompute_cache(self, which: str):
        cache = self.viqr_cache if which == "viqr" else self.imiqr_cache
        per = []
        for c in self.gp.samples:
            if len(self.gp.training):
                Kc = kernel_matrix(self.gp.training.points, cache, c.psi)
                B = cho_solve((c.chol, True), Kc)  # A^-1 kappa(Theta, cache)
                V = solve_triangular(c.chol, Kc, lower=True)
                s2 = np.maximum(c.psi.sf2 + c.jitter_var
                                - np.sum(V**2, axis=0), 0.0)
            else:
                B = np.zeros((0, cache.shape[0]))
                s2 = np.full(cache.shape[0], c.psi.sf2 + c.jitter_var)
            per.append({"B": B, "s2": s2, "s": np.sqrt(s2)})
        setattr(self, f"_pre_{which}", per)

    def sigma_obs_at(self, theta):
        return estimate_noise_at(self.gp.training, self.ell_bar, theta)

    # -- batch evaluators (log scale for ranking where noted) --------------

    def latent_mean_var(self, Theta):
        return self.gp.posterior_mean_var(np.atleast_2d(Theta))

    def batch_pro_log(self, Theta):
        """log a_pro, vectorized; safe against exp overflow."""
        Theta = np.atleast_2d(Theta)
        fbar, s2 = self.latent_mean_var(Theta)
        logq = np.atleast_1d(self.vp.log_pdf(Theta))
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(s2, 0.0)) + logq + fbar

    def batch_npro_log(self, Theta):
        Theta = np.atleast_2d(Theta)
        fbar, s2 = self.latent_mean_var(Theta)
        sig2 = np.atleast_1d(self.sigma_obs_at(Theta)) ** 2
        logq = np.atleast_1d(self.vp.log_pdf(Theta))
        with np.errstate(divide="ignore"):
            return (np.log(np.maximum(s2, 0.0))
                    + np.log(s2 / np.maximum(s2 + sig2, 1e-300))
                    + logq + fbar)

    def batch_eig(self, Theta):
        Theta = np.atleast_2d(Theta)
        M = Theta.shape[0]
        sig2 = np.atleast_1d(self.sigma_obs_at(Theta)) ** 2
        _, G_var_per = _per_sample_G(self.gp, self.vp)
        means, s2 = self.gp.posterior(Theta)
        rho_acc = np.zeros(M)
        for s, c in enumerate(self.gp.samples):
            z_star, _, _ = _mix_z(c, self.vp, Theta)  # (K, M)
            numer = self.vp.w @ z_star
            if len(self.gp.training):
                z, _, _ = _mix_z(c, self.vp, self.gp.training.points)
                azbar = cho_solve((c.chol, True), self.vp.w @ z)
                Kt = kernel_matrix(Theta, self.gp.training.points, c.psi)
                numer = numer - Kt @ azbar
            v = s2[s] + c.psi.noise_base_var + sig2
            denom = np.sqrt(np.maximum(v * G_var_per[s], 1e-300))
            rho_acc += np.clip(numer / denom, -1.0, 1.0)
        rho = np.clip(rho_acc / self.gp.n_samples, -1.0, 1.0)
        rho2 = np.minimum(rho**2, 1.0 - 1e-12)
        return -0.5 * np.log1p(-rho2)

    def _batch_iqr_gain(self, Theta, which: str):
        """Reduction of the integrated IQR criterion; >= 0."""
        Theta = np.atleast_2d(Theta)
        cache = self.viqr_cache if which == "viqr" else self.imiqr_cache
        weights = (np.full(cache.shape[0], 1.0 / cache.shape[0])
                   if which == "viqr" else self.imiqr_weights)
        pre = getattr(self, f"_pre_{which}")
        sig2 = np.atleast_1d(self.sigma_obs_at(Theta)) ** 2
        gain = np.zeros(Theta.shape[0])
        for c, p in zip(self.gp.samples, pre):
            k_cc = kernel_matrix(Theta, cache, c.psi)  # (M_theta, M_cache)
            if len(self.gp.training):
                Kt = kernel_matrix(Theta, self.gp.training.points, c.psi)
                cross = k_cc - Kt @ p["B"]
                V = solve_triangular(c.chol, Kt.T, lower=True)
                c_self = c.psi.sf2 + c.jitter_var - np.sum(V**2, axis=0)
            else:
                cross = k_cc
                c_self = np.full(Theta.shape[0], c.psi.sf2 + c.jitter_var)
            denom = np.maximum(c_self + c.psi.noise_base_var + sig2, 1e-300)
            s2_new = np.maximum(p["s2"][None, :]
                                - cross**2 / denom[:, None], 0.0)
            base = np.sinh(np.minimum(self.u * p["s"], 300.0))
            new = np.sinh(np.minimum(self.u * np.sqrt(s2_new), 300.0))
            gain += 2.0 * (base[None, :] - new) @ weights
        return gain / self.gp.n_samples

    def batch_viqr(self, Theta):
        return self._batch_iqr_gain(Theta, "viqr")

    def batch_imiqr(self, Theta):
        if self.imiqr_cache is None:
            raise StateError("state was not created with kind='imiqr'")
        return self._batch_iqr_gain(Theta, "imiqr")

    # -- regularizers ------------------------------------------------------

    def log_regularizer(self, Theta):
        """log(b_var * b_bnd) per point; -inf where the bound term fires."""
        Theta = np.atleast_2d(Theta)
        _, s2 = self.latent_mean_var(Theta)
        with np.errstate(divide="ignore"):
            log_b = np.where(s2 < V_REG,
                             -(V_REG / np.maximum(s2, 1e-300) - 1.0), 0.0)
        lb_eps = self.space.lb + BOUND_EPS * (self.space.ub - self.space.lb)
        ub_eps = self.space.ub - BOUND_EPS * (self.space.ub - self.space.lb)
        X = self.space.from_inference(Theta)
        out = np.any((X < lb_eps) | (X > ub_eps), axis=1)
        log_b[out] = -np.inf
        for pt in self.excluded:
            hit = np.all(np.abs(Theta - pt) < 1e-9, axis=1)
            log_b[hit] = -np.inf
        return log_b

    def batch_log_objective(self, Theta, kind: str, regularized=True):
        """Ranking objective in log scale for all acquisition kinds."""
        if kind == "pro":
            vals = self.batch_pro_log(Theta)
        elif kind == "npro":
            vals = self.batch_npro_log(Theta)
        else:
            if kind == "eig":
                raw = self.batch_eig(Theta)
            elif kind == "viqr":
                raw = self.batch_viqr(Theta)
            elif kind == "imiqr":
                raw = self.batch_imiqr(Theta)
            else:
                raise ValueError(f"unknown acquisition kind {kind!r}")
            with np.errstate(divide="ignore"):
                vals = np.log(np.maximum(raw, 0.0))
        if regularized:
            vals = vals + self.log_regularizer(Theta)
        return vals


# ---------------------------------------------------------------------------
# Spec-level single-point wrappers


def acq_pro(state: AcquisitionState, theta) -> float:
    fbar, s2 = state.latent_mean_var(np.atleast_2d(theta))
    return float(s2[0] * state.vp.pdf(theta) * np.exp(fbar[0]))


def acq_npro(state: AcquisitionState, theta) -> float:
    fbar, s2 = state.latent_mean_var(np.atleast_2d(theta))
    sig2 = state.sigma_obs_at(theta) ** 2
    ds2 = s2[0] ** 2 / max(s2[0] + sig2, 1e-300)
    return float(ds2 * state.vp.pdf(theta) * np.exp(fbar[0]))


def acq_eig(state: AcquisitionState, theta) -> float:
    return float(state.batch_eig(np.atleast_2d(theta))[0])


def acq_viqr(state: AcquisitionState, theta) -> float:
    return float(state.batch_viqr(np.atleast_2d(theta))[0])


def acq_imiqr(state: AcquisitionState, theta) -> float:
    return float(state.batch_imiqr(np.atleast_2d(theta))[0])


def regularize(acq_value: float, state: AcquisitionState, theta) -> float:
    """Multiply by the variance and bound regularizers b_var * b_bnd."""
    log_b = float(state.log_regularizer(np.atleast_2d(theta))[0])
    return float(acq_value * np.exp(log_b))


# ---------------------------------------------------------------------------
# Acquisition optimization


def _pattern_search(fun, x0, scales, budget: int = 200):
    """Derivative-free coordinate search with shrinking steps (maximizes).

    ``fun`` must accept an (M, D) batch and return M values; all 2D
    coordinate proposals of a round are evaluated in one batch.
    """
    x = np.array(x0, dtype=float)
    fx = float(fun(x[None, :])[0])
    scales = np.asarray(scales, float)
    step = 0.25 * scales
    evals = 0
    D = x.size
    while evals < budget:
        cands = np.repeat(x[None, :], 2 * D, axis=0)
        for d in range(D):
            cands[2 * d, d] += step[d]
            cands[2 * d + 1, d] -= step[d]
        fc = fun(cands)
        evals += 2 * D
        best = int(np.argmax(fc))
        if fc[best] > fx:
            x, fx = cands[best], float(fc[best])
        else:
            step *= 0.5
            if np.all(step < 1e-6 * scales):
                break
    return x, fx


def optimize_acq(state: AcquisitionState, kind: str, rng: np.random.Generator,
                 n_candidates: int = 512, refine_budget: int = 200):
    """Candidate search plus local refinement of the regularized acquisition.

    Returns ``(theta_star, diagnostics)`` with diagnostics reporting
    whether the regularizer wiped out every candidate.
    """
    if kind not in ACQ_KINDS:
        raise ValueError(f"unknown acquisition kind {kind!r}")
    t0 = time.perf_counter()
    lo, hi = state.space.plausible_box_inference()
    cands = np.vstack([
        state.vp.sample(n_candidates, rng),
        rng.uniform(lo, hi, size=(n_candidates, state.space.D)),
    ])
    vals = state.batch_log_objective(cands, kind, regularized=True)
    diagnostics = {"all_regularized_out": False}
    if not np.any(np.isfinite(vals)):
        diagnostics["all_regularized_out"] = True
        vals = state.batch_log_objective(cands, kind, regularized=False)
        if not np.any(np.isfinite(vals)):
            vals = np.zeros(len(cands))
    best = cands[int(np.argmax(vals))]

    scales = np.maximum(hi - lo, 1e-6)

    def fun(X):
        return state.batch_log_objective(X, kind)

    theta_star, _ = _pattern_search(fun, best, 0.05 * scales,
                                    budget=refine_budget)
    diagnostics["time_s"] = time.perf_counter() - t0
    return theta_star, diagnostics
