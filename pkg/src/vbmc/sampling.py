"""Coordinate-wise slice sampling with stepping-out.

Used both for GP hyperparameter posterior sampling and as ground-truth
MCMC tooling for the benchmark problems.
"""

from __future__ import annotations

import numpy as np


def slice_sweep(x, log_target, widths, rng, log_px=None, max_steps=256):
    """One random-scan sweep of univariate slice sampling over all coordinates.

    Returns the new state and its log-target value.
    """
    x = np.array(x, dtype=float)
    D = x.size
    widths = np.broadcast_to(np.asarray(widths, dtype=float), (D,))
    if log_px is None:
        log_px = log_target(x)
    for d in rng.permutation(D):
        log_u = log_px + np.log(rng.uniform())
        r = rng.uniform()
        x_l, x_r = x.copy(), x.copy()
        x_l[d] -= r * widths[d]
        x_r[d] += (1.0 - r) * widths[d]
        # Stepping-out.
        steps = 0
        while log_target(x_l) > log_u and steps < max_steps:
            x_l[d] -= widths[d]
            steps += 1
        steps = 0
        while log_target(x_r) > log_u and steps < max_steps:
            x_r[d] += widths[d]
            steps += 1
        # Shrinkage until acceptance.
        while True:
            xp = x.copy()
            xp[d] = rng.uniform(x_l[d], x_r[d])
            log_pxp = log_target(xp)
            if log_pxp > log_u:
                x, log_px = xp, log_pxp
                break
            if xp[d] < x[d]:
                x_l[d] = xp[d]
            else:
                x_r[d] = xp[d]
            if x_r[d] - x_l[d] < 1e-14 * max(1.0, abs(x[d])):
                # Degenerate shrinkage; keep the current state.
                break
    return x, log_px


def slice_sample_mcmc(log_target, x0, n_samples, widths, rng,
                      burn=None, thin=1):
    """Draw ``n_samples`` via coordinate slice sampling with stepping-out.

    Parameters
    ----------
    log_target : callable
        Log of the (unnormalized) target density; may return ``-inf``
        outside the support.
    x0 : array-like, shape (D,)
        Initial state with finite log-target.
    widths : array-like
        Initial bracket size per coordinate (broadcastable to D).
    burn : int, optional
        Burn-in sweeps, default ``n_samples // 5``.
    thin : int
        Keep one sample every ``thin`` sweeps.

    Returns
    -------
    samples : ndarray, shape (n_samples, D)
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    lp = log_target(x0)
    if not np.isfinite(lp):
        raise ValueError("initial point has non-finite log-target")
    if burn is None:
        burn = max(10, n_samples // 5)
    x = x0
    for _ in range(burn):
        x, lp = slice_sweep(x, log_target, widths, rng, log_px=lp)
    samples = np.empty((n_samples, x0.size))
    for i in range(n_samples):
        for _ in range(thin):
            x, lp = slice_sweep(x, log_target, widths, rng, log_px=lp)
        samples[i] = x
    return samples
