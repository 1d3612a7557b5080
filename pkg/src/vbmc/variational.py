"""Mixture-of-Gaussians variational posterior.

K components share a diagonal scaling ``lam``; component k has mean
``mu_k`` and covariance ``sigma_k^2 * diag(lam^2)``. The unconstrained
parameterization used for optimization is
``[weight logits (K), means (K*D), log sigma (K), log lam (D)]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_FLOOR = 1e-6  # components below this weight are pruned
_CORR_ZERO_TOL = 0.05


@dataclass
class VariationalPosterior:
    w: np.ndarray  # (K,) simplex
    mu: np.ndarray  # (K, D)
    sigma: np.ndarray  # (K,) positive
    lam: np.ndarray  # (D,) positive

    def __post_init__(self):
        self.w = np.atleast_1d(np.asarray(self.w, float))
        self.mu = np.atleast_2d(np.asarray(self.mu, float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, float))
        self.lam = np.atleast_1d(np.asarray(self.lam, float))
        if abs(self.w.sum() - 1.0) > 1e-8 or np.any(self.w < 0):
            raise ValueError("weights must form a simplex")
        if np.any(self.sigma <= 0) or np.any(self.lam <= 0):
            raise ValueError("scales must be positive")
        if self.mu.shape != (self.K, self.D):
            raise ValueError("mu must have shape (K, D)")

    def to_dict(self) -> dict:
        """Plain-type representation for JSON round-tripping."""
        return {"w": self.w.tolist(), "mu": self.mu.tolist(),
                "sigma": self.sigma.tolist(), "lam": self.lam.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VariationalPosterior":
        return cls(np.asarray(d["w"], float), np.asarray(d["mu"], float),
                   np.asarray(d["sigma"], float),
                   np.asarray(d["lam"], float))

    @property
    def K(self) -> int:
        return self.w.size

    @property
    def D(self) -> int:
        return self.mu.shape[1]

    # -- density ----------------------------------------------------------

    def _log_components(self, theta: np.ndarray) -> np.ndarray:
        """log N(theta_m; mu_k, sigma_k^2 diag(lam^2)) for all m, k; (M, K)."""
        theta = np.atleast_2d(theta)
        scales = self.sigma[None, :, None] * self.lam[None, None, :]  # (1,K,D)
        z = (theta[:, None, :] - self.mu[None, :, :]) / scales
        log_norm = (-0.5 * self.D * np.log(2 * np.pi)
                    - self.D * np.log(self.sigma)[None, :]
                    - np.sum(np.log(self.lam)))
        return log_norm - 0.5 * np.sum(z**2, axis=2)

    def log_pdf(self, theta):
        theta_arr = np.atleast_2d(np.asarray(theta, float))
        with np.errstate(divide="ignore"):
            lw = self._log_components(theta_arr) + np.log(self.w)
        mx = lw.max(axis=1)
        out = mx + np.log(np.sum(np.exp(lw - mx[:, None]), axis=1))
        return out if np.ndim(theta) > 1 else float(out[0])

    def pdf(self, theta):
        return np.exp(self.log_pdf(theta))

    # -- sampling ---------------------------------------------------------

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.K, size=n, p=self.w)
        eps = rng.standard_normal((n, self.D))
        return self.mu[ks] + self.sigma[ks, None] * self.lam[None, :] * eps

    # -- moments ----------------------------------------------------------

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and covariance of the mixture, in closed form."""
        mean = self.w @ self.mu
        C = np.diag(np.sum(self.w * self.sigma**2) * self.lam**2)
        C += np.einsum("k,ki,kj->ij", self.w, self.mu, self.mu)
        C -= np.outer(mean, mean)
        return mean, 0.5 * (C + C.T)

    # -- unconstrained parameter vector -----------------------------------

    def to_unconstrained(self) -> np.ndarray:
        return np.concatenate([
            np.log(np.maximum(self.w, 1e-300)),
            self.mu.ravel(),
            np.log(self.sigma),
            np.log(self.lam),
        ])

    @classmethod
    def from_unconstrained(cls, phi: np.ndarray, K: int, D: int
                           ) -> "VariationalPosterior":
        eta, rest = phi[:K], phi[K:]
        w = np.exp(eta - eta.max())
        w = w / w.sum()
        mu = rest[: K * D].reshape(K, D)
        sigma = np.exp(rest[K * D : K * D + K])
        lam = np.exp(rest[K * D + K :])
        return cls(w=w, mu=mu, sigma=sigma, lam=lam)

    def prune(self) -> "VariationalPosterior":
        """Drop components below the weight floor (keeping at least one)."""
        keep = self.w >= WEIGHT_FLOOR
        if np.all(keep) or not np.any(keep):
            return self
        w = self.w[keep]
        return VariationalPosterior(w=w / w.sum(), mu=self.mu[keep],
                                    sigma=self.sigma[keep], lam=self.lam)

    # -- entropy ----------------------------------------------------------

    def entropy_mc(self, n_samples: int, rng: np.random.Generator,
                   with_grad: bool = True):
        """Stratified Monte-Carlo entropy estimate and its gradient.

        Draws ``n_samples`` standard-normal vectors per component; the
        estimator is ``-sum_k w_k mean_s log q(mu_k + sigma_k lam eps)``,
        differentiable in all unconstrained parameters for fixed draws
        (so finite differences under common random numbers match the
        analytic gradient).
        """
        K, D, n = self.K, self.D, int(n_samples)
        eps = rng.standard_normal((K, n, D))
        scales = self.sigma[:, None, None] * self.lam[None, None, :]
        pts = (self.mu[:, None, :] + scales * eps).reshape(K * n, D)

        log_comp = self._log_components(pts) + np.log(self.w)  # (Kn, K)
        mx = log_comp.max(axis=1)
        log_q = mx + np.log(np.sum(np.exp(log_comp - mx[:, None]), axis=1))
        H = -float(np.sum(self.w * np.mean(log_q.reshape(K, n), axis=1)))
        if not with_grad:
            return H, None

        gamma = np.exp(log_comp - log_q[:, None])  # responsibilities, (Kn, K)
        inv_var = 1.0 / (self.sigma[:, None] ** 2 * self.lam[None, :] ** 2)  # (K, D)
        diff = pts[:, None, :] - self.mu[None, :, :]  # (Kn, K, D)
        # d log q / d theta at each point.
        dlogq_dtheta = -np.einsum("mj,mjd,jd->md", gamma, diff, inv_var)

        w_rep = np.repeat(self.w / n, n)  # stratum weight per point

        # Weights: explicit mixture term plus density pathway.
        L_k = np.mean(log_q.reshape(K, n), axis=1)
        dH_dw = -L_k - np.einsum("m,mj->j", w_rep, gamma) / self.w
        grad_eta = self.w * (dH_dw - np.dot(self.w, dH_dw))

        # Means: pathwise term (own stratum) + density term (all strata).
        strat = np.repeat(np.arange(K), n)
        path = -w_rep[:, None] * dlogq_dtheta
        grad_mu = path.reshape(K, n, D).sum(axis=1)  # strata are contiguous
        grad_mu -= np.einsum("m,mj,mjd,jd->jd", w_rep, gamma, diff, inv_var)

        # Sigma: pathwise d theta/d sigma_k = (theta - mu_k)/sigma_k.
        own_diff = diff[np.arange(K * n), strat]  # (Kn, D)
        path_sig = -w_rep * np.einsum("md,md->m", dlogq_dtheta,
                                      own_diff) / self.sigma[strat]
        grad_sigma = path_sig.reshape(K, n).sum(axis=1)
        maha = np.einsum("mjd,jd->mj", diff**2, inv_var)
        grad_sigma -= np.einsum("m,mj,mj->j", w_rep, gamma,
                                (maha - D)) / self.sigma

        # Lambda: pathwise + density, per coordinate.
        grad_lam = -np.einsum("m,md,md->d", w_rep, dlogq_dtheta,
                              own_diff) / self.lam
        grad_lam -= np.einsum("m,mj,mjd->d", w_rep, gamma,
                              diff**2 * inv_var[None, :, :] - 1.0) / self.lam

        grad = np.concatenate([
            grad_eta,
            grad_mu.ravel(),
            grad_sigma * self.sigma,  # chain to log sigma
            grad_lam * self.lam,  # chain to log lambda
        ])
        return H, grad


# ---------------------------------------------------------------------------
# Whitening


@dataclass(frozen=True)
class WhiteningMap:
    W: np.ndarray
    b: np.ndarray
    fallback: bool  # True when the corrected covariance was not PSD


def compute_whitening(vp: VariationalPosterior) -> WhiteningMap:
    """Affine map giving the pushforward of ``vp`` unit diagonal covariance.

    Correlations below 0.05 in absolute value are zeroed before the SVD;
    if the corrected matrix is not PSD the map degrades to diagonal
    rescaling only.
    """
    mean, C = vp.moments()
    sd = np.sqrt(np.diag(C))
    corr = C / np.outer(sd, sd)
    corr_z = np.where(np.abs(corr) < _CORR_ZERO_TOL, 0.0, corr)
    np.fill_diagonal(corr_z, 1.0)
    C_tilde = corr_z * np.outer(sd, sd)

    eigval, eigvec = np.linalg.eigh(C_tilde)
    if np.min(eigval) <= 1e-12 * np.max(eigval):
        W0 = np.diag(1.0 / sd)
        fallback = True
    else:
        W0 = np.diag(1.0 / np.sqrt(eigval)) @ eigvec.T
        fallback = False
    # Rescale rows so the true (uncorrected) pushforward has exactly unit
    # diagonal covariance.
    d = np.sqrt(np.diag(W0 @ C @ W0.T))
    W = W0 / d[:, None]
    return WhiteningMap(W=W, b=-W @ mean, fallback=fallback)
