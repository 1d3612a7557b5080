"""Closed-form Bayesian quadrature of the GP log joint against the
variational mixture, and stochastic-gradient optimization of the ELBO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from vbmc.gp import GpModel, StateError, kernel_matrix
from vbmc.variational import VariationalPosterior


@dataclass(frozen=True)
class ElboEstimate:
    """Posterior mean/SD of the surrogate ELBO and its pieces."""

    elbo_mean: float
    elbo_sd: float
    G_mean: float
    G_var: float
    entropy: float

    @classmethod
    def assemble(cls, G_mean: float, G_var: float, entropy: float
                 ) -> "ElboEstimate":
        G_var = max(G_var, 0.0)
        return cls(elbo_mean=G_mean + entropy, elbo_sd=float(np.sqrt(G_var)),
                   G_mean=G_mean, G_var=G_var, entropy=entropy)


def _mix_z(gp_sample, vp: VariationalPosterior, pts: np.ndarray):
    """Kernel integrals z_k^{(n)} = int N(.; mu_k, sigma_k^2 Sigma) kappa(., pt_n).

    Returns ``z`` of shape (K, N) plus the per-(k, n, d) inverse total
    variances and differences used by gradients.
    """
    psi = gp_sample.psi
    ell2 = psi.ell**2  # (D,)
    comp_var = (vp.sigma[:, None] ** 2) * (vp.lam[None, :] ** 2)  # (K, D)
    v = ell2[None, :] + comp_var  # (K, D)
    diff = vp.mu[:, None, :] - pts[None, :, :]  # (K, N, D)
    quad = np.einsum("knd,kd->kn", diff**2, 1.0 / v)
    with np.errstate(divide="ignore"):
        log_pref = (np.log(psi.sf2) + np.sum(np.log(psi.ell))
                    - 0.5 * np.sum(np.log(v), axis=1))  # (K,)
    z = np.exp(log_pref[:, None] - 0.5 * quad)
    return z, v, diff


def _mean_expectation(gp_sample, vp: VariationalPosterior):
    """E_{N(mu_k, sigma_k^2 Sigma)}[m(theta)] per component, shape (K,)."""
    psi = gp_sample.psi
    with np.errstate(over="ignore"):
        om2 = psi.omega**2
    dm = vp.mu - psi.theta_m[None, :]
    comp_var = (vp.sigma[:, None] ** 2) * (vp.lam[None, :] ** 2)
    return psi.m0 - 0.5 * np.sum((dm**2 + comp_var) / om2, axis=1)


def expected_log_joint(gp: GpModel, vp: VariationalPosterior,
                       with_grad: bool = True):
    """Posterior mean and variance of E_q[f] under the GP, in closed form.

    Returns ``(G_mean, G_var, grad)`` with ``grad`` the gradient of
    ``G_mean`` with respect to the unconstrained variational parameters
    (None when ``with_grad`` is False). With several GP hyperparameter
    samples the mean is averaged and the variance combines the mean of
    variances with the variance of means.
    """
    if not gp.samples:
        raise StateError("GP model is not fitted")
    K, D = vp.K, vp.D
    pts = gp.training.points
    N = len(gp.training)

    means = np.empty(gp.n_samples)
    vars_ = np.empty(gp.n_samples)
    grad = np.zeros(2 * K + K * D + D) if with_grad else None
    for s, c in enumerate(gp.samples):
        psi = c.psi
        z, v, diff = _mix_z(c, vp, pts) if N else (np.zeros((K, 0)),
                                                  None, None)
        Em = _mean_expectation(c, vp)
        g_k = z @ c.alpha + Em if N else Em  # (K,)
        means[s] = float(vp.w @ g_k)

        # Variance: prior double integral minus the data correction.
        comp_var = (vp.sigma[:, None] ** 2) * (vp.lam[None, :] ** 2)
        vv = (psi.ell**2)[None, None, :] + comp_var[:, None, :] + comp_var[None, :, :]
        dmu = vp.mu[:, None, :] - vp.mu[None, :, :]
        quad = np.einsum("jkd,jkd->jk", dmu**2, 1.0 / vv)
        with np.errstate(divide="ignore"):
            log_pref = (np.log(psi.sf2) + np.sum(np.log(psi.ell))
                        - 0.5 * np.sum(np.log(vv), axis=2))
        prior_term = float(vp.w @ np.exp(log_pref - 0.5 * quad) @ vp.w)
        if N:
            zbar = vp.w @ z  # (N,)
            corr = float(zbar @ cho_solve((c.chol, True), zbar))
        else:
            corr = 0.0
        vars_[s] = max(prior_term - corr, 0.0)

        if not with_grad:
            continue
        # Gradient of the per-sample mean w.r.t. unconstrained parameters.
        g_eta = vp.w * (g_k - float(vp.w @ g_k))
        with np.errstate(over="ignore"):
            om2 = psi.omega**2
        if N:
            az = z * c.alpha[None, :]  # (K, N)
            g_mu = np.einsum("kn,knd,kd->kd", az, -diff, 1.0 / v)
        else:
            g_mu = np.zeros((K, D))
        g_mu -= (vp.mu - psi.theta_m[None, :]) / om2[None, :]
        g_mu *= vp.w[:, None]

        lam2 = vp.lam[None, :] ** 2
        if N:
            dz_dv = np.einsum("kn,knd->kd", az,
                              diff**2 / v[:, None, :] ** 2 - 1.0 / v[:, None, :])
        else:
            dz_dv = np.zeros((K, D))
        g_sig = 0.5 * np.sum(dz_dv * 2.0 * vp.sigma[:, None] * lam2, axis=1)
        g_sig -= vp.sigma * np.sum(lam2 / om2[None, :], axis=1)
        g_sig *= vp.w
        g_lam = 0.5 * np.einsum("k,kd->d", vp.w,
                                dz_dv * 2.0 * vp.sigma[:, None] ** 2
                                * vp.lam[None, :])
        g_lam -= np.sum(vp.w * vp.sigma**2) * vp.lam / om2
        grad += np.concatenate([
            g_eta, g_mu.ravel(), g_sig * vp.sigma, g_lam * vp.lam,
        ]) / gp.n_samples

    G_mean = float(means.mean())
    G_var = float(vars_.mean() + means.var())
    return G_mean, G_var, grad


def elbo(gp: GpModel, vp: VariationalPosterior, n_entropy: int,
         rng: np.random.Generator) -> ElboEstimate:
    """Surrogate ELBO estimate combining quadrature and MC entropy."""
    G_mean, G_var, _ = expected_log_joint(gp, vp, with_grad=False)
    H, _ = vp.entropy_mc(n_entropy, rng, with_grad=False)
    return ElboEstimate.assemble(G_mean, G_var, H)


def scalar_correlation(gp: GpModel, vp: VariationalPosterior, theta_star,
                       noise_var_star: float = 0.0) -> float:
    """Correlation between the expected-log-joint estimate and a new
    observation at ``theta_star``; in [-1, 1].

    ``noise_var_star`` is the observation-noise variance attributed to
    the prospective evaluation (the predictive variance in the
    denominator includes it).
    """
    ts = np.atleast_1d(np.asarray(theta_star, float))
    _, G_var_per = _per_sample_G(gp, vp)
    _, s2 = gp.posterior(ts[None, :])
    rhos = np.empty(gp.n_samples)
    for s, c in enumerate(gp.samples):
        z_star, _, _ = _mix_z(c, vp, ts[None, :])  # (K, 1)
        if len(gp.training):
            z, _, _ = _mix_z(c, vp, gp.training.points)
            k_star = kernel_matrix(gp.training.points, ts[None, :], c.psi)[:, 0]
            numer = float(vp.w @ z_star[:, 0]
                          - (vp.w @ z) @ cho_solve((c.chol, True), k_star))
        else:
            numer = float(vp.w @ z_star[:, 0])
        v_star = s2[s, 0] + c.psi.noise_base_var + float(noise_var_star)
        denom_sq = v_star * G_var_per[s]
        if denom_sq <= 1e-300:
            rhos[s] = 0.0
        else:
            rhos[s] = numer / np.sqrt(denom_sq)
    rho = float(np.clip(np.mean(rhos), -1.0, 1.0))
    return rho


def _per_sample_G(gp: GpModel, vp: VariationalPosterior):
    """Per-hyperparameter-sample (G_mean, G_var) arrays."""
    means = np.empty(gp.n_samples)
    vars_ = np.empty(gp.n_samples)
    pts = gp.training.points
    N = len(gp.training)
    for s, c in enumerate(gp.samples):
        psi = c.psi
        Em = _mean_expectation(c, vp)
        if N:
            z, _, _ = _mix_z(c, vp, pts)
            means[s] = float(vp.w @ (z @ c.alpha + Em))
        else:
            means[s] = float(vp.w @ Em)
        comp_var = (vp.sigma[:, None] ** 2) * (vp.lam[None, :] ** 2)
        vv = (psi.ell**2)[None, None, :] + comp_var[:, None, :] + comp_var[None, :, :]
        dmu = vp.mu[:, None, :] - vp.mu[None, :, :]
        quad = np.einsum("jkd,jkd->jk", dmu**2, 1.0 / vv)
        with np.errstate(divide="ignore"):
            log_pref = (np.log(psi.sf2) + np.sum(np.log(psi.ell))
                        - 0.5 * np.sum(np.log(vv), axis=2))
        prior_term = float(vp.w @ np.exp(log_pref - 0.5 * quad) @ vp.w)
        if N:
            zbar = vp.w @ z
            prior_term -= float(zbar @ cho_solve((c.chol, True), zbar))
        vars_[s] = max(prior_term, 1e-300)
    return means, vars_


# ---------------------------------------------------------------------------
# Stochastic-gradient ELBO optimization


@dataclass
class OptimizeResult:
    vp: VariationalPosterior
    estimate: ElboEstimate
    diverged: bool = False


def optimize_vp(gp: GpModel, vp_init: VariationalPosterior, n_steps: int,
                rng: np.random.Generator, n_entropy: int = 64,
                n_entropy_final: int = 2**14, step_size: float = 0.01,
                n_starts: int = 2) -> OptimizeResult:
    """Maximize the surrogate ELBO by Adam over unconstrained parameters.

    Runs ``n_starts`` optimizations (the initial posterior and a
    perturbed copy) and returns the best candidate by a final
    high-sample ELBO evaluation; the initial posterior itself is always
    among the candidates. Deterministic given the rng.
    """
    K, D = vp_init.K, vp_init.D
    candidates = [vp_init]
    diverged = False

    starts = [vp_init]
    for _ in range(max(n_starts - 1, 0)):
        pert = VariationalPosterior(
            w=vp_init.w,
            mu=vp_init.mu + (0.2 * vp_init.sigma[:, None] * vp_init.lam[None, :]
                             * rng.standard_normal((K, D))),
            sigma=vp_init.sigma * np.exp(0.1 * rng.standard_normal(K)),
            lam=vp_init.lam,
        )
        starts.append(pert)

    beta1, beta2, eps_adam = 0.9, 0.99, 1e-8
    for start in starts:
        phi = start.to_unconstrained()
        m = np.zeros_like(phi)
        v = np.zeros_like(phi)
        last_finite = phi.copy()
        for step in range(1, int(n_steps) + 1):
            vp = VariationalPosterior.from_unconstrained(phi, K, D)
            _, _, gG = expected_log_joint(gp, vp, with_grad=True)
            _, gH = vp.entropy_mc(n_entropy, rng)
            g = gG + gH
            if not np.all(np.isfinite(g)):
                phi = last_finite
                diverged = True
                break
            last_finite = phi.copy()
            m = beta1 * m + (1 - beta1) * g
            v = beta2 * v + (1 - beta2) * g**2
            mhat = m / (1 - beta1**step)
            vhat = v / (1 - beta2**step)
            phi = phi + step_size * mhat / (np.sqrt(vhat) + eps_adam)
        candidates.append(VariationalPosterior.from_unconstrained(phi, K, D))

    best_vp, best_est = None, None
    for cand in candidates:
        est = elbo(gp, cand, n_entropy_final, np.random.default_rng(
            rng.integers(2**31)))
        if best_est is None or est.elbo_mean > best_est.elbo_mean:
            best_vp, best_est = cand, est
    return OptimizeResult(vp=best_vp, estimate=best_est, diverged=diverged)
