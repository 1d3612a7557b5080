import numpy as np
import pytest

from vbmc.gp import (GpHyperparams, HyperPrior, StateError, TrainingSet,
                     fit_gp, gp_log_posterior_hyp, kernel, kernel_matrix,
                     mean_fn, n_hyperparams)


def make_psi(D, rng=None, **overrides):
    rng = rng or np.random.default_rng(0)
    vec = np.zeros(n_hyperparams(D))
    vec[:D] = np.log(rng.uniform(0.5, 1.5, D))          # log ell
    vec[D] = np.log(rng.uniform(0.8, 1.5))              # log sf
    vec[D + 1] = np.log(rng.uniform(0.05, 0.2))         # log base noise
    vec[D + 2] = rng.uniform(-1, 1)                     # m0
    vec[D + 3:2 * D + 3] = rng.uniform(-0.5, 0.5, D)    # theta_m
    vec[2 * D + 3:] = np.log(rng.uniform(1.0, 3.0, D))  # log omega
    psi = GpHyperparams(vec)
    for key, val in overrides.items():
        idx = {"log_ell": slice(0, D), "log_sf": D, "log_noise": D + 1,
               "m0": D + 2, "theta_m": slice(D + 3, 2 * D + 3),
               "log_omega": slice(2 * D + 3, 3 * D + 3)}[key]
        vec = psi.vec.copy()
        vec[idx] = val
        psi = GpHyperparams(vec)
    return psi


def make_training(D, N, rng, noise_sd=0.1):
    ts = TrainingSet(D)
    psi = make_psi(D, rng)
    pts = rng.uniform(-2, 2, (N, D))
    for p in pts:
        ts.add(p, float(np.sin(p).sum() + noise_sd * rng.standard_normal()),
               noise_sd)
    return ts


# -- kernel / mean ----------------------------------------------------------


def test_kernel_zero_distance():
    psi = make_psi(2)
    th = np.array([0.3, -0.7])
    assert kernel(th, th, psi) == pytest.approx(psi.sf2)


def test_kernel_symmetry():
    rng = np.random.default_rng(1)
    psi = make_psi(3, rng)
    for _ in range(10):
        a, b = rng.standard_normal(3), rng.standard_normal(3)
        assert kernel(a, b, psi) == pytest.approx(kernel(b, a, psi))


def test_kernel_ten_lengthscales():
    psi = make_psi(2, log_ell=np.log(0.7))
    a = np.zeros(2)
    b = np.array([10 * 0.7, 0.0])
    assert kernel(a, b, psi) == pytest.approx(psi.sf2 * np.exp(-50.0))


def test_mean_fn_maximum_and_offset():
    psi = make_psi(2)
    assert mean_fn(psi.theta_m, psi) == pytest.approx(psi.m0)
    th = psi.theta_m.copy()
    th[0] += psi.omega[0]
    assert mean_fn(th, psi) == pytest.approx(psi.m0 - 0.5)


def test_mean_fn_negative_quadratic_decay():
    psi = make_psi(1)
    vals = [mean_fn(psi.theta_m + np.array([r]), psi) for r in (10, 100)]
    assert vals[1] < vals[0] < psi.m0


# -- posterior --------------------------------------------------------------


def fit_map(ts, rng, ranges=None):
    return fit_gp(ts, "map", rng,
                  ranges if ranges is not None else np.ones(ts.D))


def test_posterior_prior_reversion_empty():
    from vbmc.gp import GpModel, _SampleCache
    psi = make_psi(2)
    ts = TrainingSet(2)
    model = GpModel(ts, [_SampleCache(psi, np.zeros((0, 0)), np.zeros(0),
                                       1e-10 * psi.sf2)])
    th = np.array([[0.5, -0.5]])
    means, vars_ = model.posterior(th)
    assert means[0, 0] == pytest.approx(mean_fn(th[0], psi))
    assert vars_[0, 0] == pytest.approx(kernel(th[0], th[0], psi), rel=1e-6)


def test_posterior_noiseless_interpolation():
    rng = np.random.default_rng(2)
    ts = TrainingSet(1)
    for x in np.linspace(-1, 1, 5):
        ts.add(np.array([x]), float(np.sin(2 * x)), np.sqrt(1e-5))
    model = fit_map(ts, rng)
    means, vars_ = model.posterior(ts.points)
    assert np.allclose(means.mean(axis=0), ts.values, atol=1e-2)
    assert np.all(vars_ < 1e-3)


def test_posterior_huge_noise_reverts_to_prior():
    rng = np.random.default_rng(3)
    psi = make_psi(1, rng)
    from vbmc.gp import GpModel, _factorize
    ts = TrainingSet(1)
    ts.add(np.array([0.0]), 5.0, 1e6)
    cache = _factorize(ts, psi)
    model = GpModel(ts, [cache])
    th = np.array([[0.2]])
    means, vars_ = model.posterior(th)
    assert means[0, 0] == pytest.approx(mean_fn(th[0], psi), abs=1e-6)
    assert vars_[0, 0] == pytest.approx(kernel(th[0], th[0], psi), rel=1e-6)


def test_unfitted_state_error():
    from vbmc.gp import GpModel
    with pytest.raises(StateError):
        GpModel(TrainingSet(1), []).posterior(np.zeros((1, 1)))


# -- rank-1 variance update -------------------------------------------------


def refit_variance(ts, psi, theta_star, noise_sd_star, query):
    """Oracle: full refit including the new point (value irrelevant)."""
    from vbmc.gp import GpModel, _factorize
    ts2 = ts.copy()
    ts2.add(theta_star, 0.0, max(noise_sd_star, np.sqrt(1e-5)))
    model = GpModel(ts2, [_factorize(ts2, psi)])
    _, v = model.posterior(np.atleast_2d(query))
    return v[0, 0]


def test_rank1_uninformative_new_point():
    rng = np.random.default_rng(4)
    ts = make_training(2, 6, rng)
    psi = make_psi(2, rng)
    from vbmc.gp import GpModel, _factorize
    model = GpModel(ts, [_factorize(ts, psi)])
    q = rng.standard_normal(2)
    _, s2 = model.posterior(np.atleast_2d(q))
    after = model.predictive_var_after(q, rng.standard_normal(2), 1e9)
    assert after == pytest.approx(s2[0, 0], rel=1e-9)


def test_rank1_noiseless_self_observation():
    rng = np.random.default_rng(5)
    ts = make_training(1, 4, rng)
    # Vanishing base noise isolates the noiseless-self-observation limit;
    # modest output scale keeps the PD jitter below the tolerance.
    psi = make_psi(1, rng, log_noise=np.log(1e-9), log_sf=np.log(0.5))
    from vbmc.gp import GpModel, _factorize
    model = GpModel(ts, [_factorize(ts, psi)])
    q = np.array([0.37])
    after = model.predictive_var_after(q, q, 0.0)
    assert abs(after) < 1e-10


def test_rank1_matches_full_refit_suite():
    rng = np.random.default_rng(6)
    worst = 0.0
    for i in range(100):
        D = int(rng.integers(1, 4))
        ts = make_training(D, int(rng.integers(3, 9)), rng,
                           noise_sd=rng.uniform(0.05, 0.5))
        psi = make_psi(D, rng)
        from vbmc.gp import GpModel, _factorize
        model = GpModel(ts, [_factorize(ts, psi)])
        q = rng.uniform(-2, 2, D)
        star = rng.uniform(-2, 2, D)
        sd_star = rng.uniform(np.sqrt(1e-5), 0.5)
        fast = model.predictive_var_after(q, star, sd_star)
        slow = refit_variance(ts, psi, star, sd_star, q)
        worst = max(worst, abs(fast - slow))
    assert worst < 1e-8


# -- hyperparameter log posterior ------------------------------------------


def test_single_point_closed_form():
    D = 1
    psi = make_psi(D)
    ts = TrainingSet(D)
    ts.add(np.array([0.4]), 1.7, 0.3)
    prior = HyperPrior.uniform(D)
    val, _ = gp_log_posterior_hyp(ts, psi.vec, prior, 0.0)
    var = psi.sf2 + psi.noise_base_var + 0.3**2
    expect = (-0.5 * np.log(2 * np.pi * var)
              - 0.5 * (1.7 - mean_fn(np.array([0.4]), psi))**2 / var)
    assert val == pytest.approx(expect, rel=1e-10)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for i in range(50):
        D = int(rng.integers(1, 4))
        ts = make_training(D, int(rng.integers(3, 8)), rng)
        psi = make_psi(D, rng)
        prior = HyperPrior.default(D, np.ones(D))
        val, grad = gp_log_posterior_hyp(ts, psi.vec, prior, 1e-10)
        eps = 1e-6
        for j in range(psi.vec.size):
            vp = psi.vec.copy(); vp[j] += eps
            vm = psi.vec.copy(); vm[j] -= eps
            fd = (gp_log_posterior_hyp(ts, vp, prior, 1e-10)[0]
                  - gp_log_posterior_hyp(ts, vm, prior, 1e-10)[0]) / (2 * eps)
            denom = max(abs(fd), abs(grad[j]), 1e-8)
            worst = max(worst, abs(fd - grad[j]) / denom)
    assert worst < 1e-5


def test_prior_location_for_lengthscales():
    D = 2
    L = np.array([1.5, 3.0])
    prior = HyperPrior.default(D, L)
    assert np.allclose(prior.mu[:D], np.log(np.sqrt(D / 6.0) * L))
    assert np.allclose(prior.sigma[:D], np.log(np.sqrt(10.0**3)))


# -- fitting ---------------------------------------------------------------


def test_map_recovery_synthetic_gp():
    rng = np.random.default_rng(8)
    D, N = 2, 80
    true_ell = np.array([0.8, 1.6])
    pts = rng.uniform(-3, 3, (N, D))
    psi_true = make_psi(D, log_ell=np.log(true_ell))
    K = kernel_matrix(pts, pts, psi_true) + 0.05**2 * np.eye(N)
    y = (np.array([mean_fn(p, psi_true) for p in pts])
         + np.linalg.cholesky(K) @ rng.standard_normal(N))
    ts = TrainingSet(D)
    for p, v in zip(pts, y):
        ts.add(p, float(v), 0.05)
    model = fit_gp(ts, "map", rng, np.ones(D) * 4.0, n_starts=3)
    fitted = np.log(model.samples[0].psi.ell)
    assert np.all(np.abs(fitted - np.log(true_ell)) < 0.5)


def test_fit_determinism():
    rng_data = np.random.default_rng(9)
    ts = make_training(2, 12, rng_data)
    m1 = fit_gp(ts, "map", np.random.default_rng(1), np.ones(2))
    m2 = fit_gp(ts, "map", np.random.default_rng(1), np.ones(2))
    assert np.allclose(m1.samples[0].psi.vec, m2.samples[0].psi.vec,
                       atol=1e-15)


def test_fit_requires_two_points():
    ts = TrainingSet(1)
    ts.add(np.zeros(1), 0.0, 0.1)
    with pytest.raises(StateError):
        fit_gp(ts, "map", np.random.default_rng(0), np.ones(1))


def test_mcmc_returns_requested_samples():
    rng = np.random.default_rng(10)
    ts = make_training(1, 8, rng)
    model = fit_gp(ts, "mcmc", rng, np.ones(1), n_mcmc=4)
    assert model.n_samples == 4


def test_duplicate_points_merged():
    ts = TrainingSet(1)
    ts.add(np.array([0.5]), 1.0, 0.2)
    merged = ts.add(np.array([0.5]), 2.0, 0.2)
    assert merged
    assert len(ts) == 1
    # Precision-weighted merge of equal noises averages the values.
    assert ts.values[0] == pytest.approx(1.5)
