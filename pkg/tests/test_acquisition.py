import numpy as np
import pytest
from scipy.stats import norm

from vbmc.acquisition import (AcquisitionState, acq_eig, acq_imiqr, acq_npro,
                              acq_pro, acq_viqr, estimate_noise_at,
                              optimize_acq, regularize)
from vbmc.gp import (GpModel, StateError, TrainingSet, _factorize,
                     kernel, mean_fn)
from vbmc.spaces import ParamSpace
from vbmc.variational import VariationalPosterior

from test_gp import make_psi


def make_space(D):
    return ParamSpace(np.full(D, -10.0), np.full(D, 10.0),
                      np.full(D, -3.0), np.full(D, 3.0))


def make_state(D=1, N=4, K=1, seed=0, noise_sd=0.1, kind="viqr",
               n_viqr=100, psi_overrides=None):
    rng = np.random.default_rng(seed)
    psi = make_psi(D, rng, **(psi_overrides or {}))
    ts = TrainingSet(D)
    for _ in range(N):
        ts.add(rng.uniform(-1.5, 1.5, D), float(rng.standard_normal()),
               noise_sd)
    gp = GpModel(ts, [_factorize(ts, psi)])
    w = np.full(K, 1.0 / K)
    vp = VariationalPosterior(w, rng.uniform(-1, 1, (K, D)),
                              np.full(K, 0.6), np.ones(D))
    state = AcquisitionState.create(gp, vp, make_space(D), rng,
                                    n_viqr=n_viqr, kind=kind)
    return state, gp, vp


# -- noise estimation -------------------------------------------------------


def test_noise_at_training_point_exact():
    state, gp, _ = make_state(D=2, N=5, noise_sd=0.37)
    th = gp.training.points[2]
    assert estimate_noise_at(gp.training, state.ell_bar, th) == pytest.approx(
        gp.training.noise_sd[2])


def test_noise_anisotropic_rescaling():
    ts = TrainingSet(2)
    ts.add(np.array([1.0, 0.0]), 0.0, 0.5)   # near in rescaled metric
    ts.add(np.array([0.0, 1.0]), 0.0, 0.9)
    # Without rescaling both are equidistant from origin; long first axis
    # makes point 0 closer.
    ell_bar = np.array([10.0, 1.0])
    assert estimate_noise_at(ts, ell_bar, np.zeros(2)) == pytest.approx(0.5)


def test_noise_empty_training_error():
    with pytest.raises(StateError):
        estimate_noise_at(TrainingSet(1), np.ones(1), np.zeros(1))


# -- PRO / NPRO -------------------------------------------------------------


def test_pro_zero_variance():
    state, gp, vp = make_state()
    # At a point whose latent variance is (numerically) zero the product
    # vanishes; emulate by direct formula with s2 = 0.
    th = np.array([0.2])
    fbar, _ = gp.posterior_mean_var(th[None, :])
    assert 0.0 * vp.pdf(th) * np.exp(fbar[0]) == 0.0


def test_pro_hand_computed_one_point_gp():
    state, gp, vp = make_state(D=1, N=1, noise_sd=0.2)
    psi = gp.samples[0].psi
    th = np.array([0.4])
    x0 = gp.training.points[0]
    k = kernel(th, x0, psi)
    a_var = (kernel(x0, x0, psi) + gp.samples[0].jitter_var
             + psi.noise_base_var + gp.training.noise_sd[0] ** 2)
    fbar = mean_fn(th, psi) + k / a_var * (
        gp.training.values[0] - mean_fn(x0, psi))
    s2 = kernel(th, th, psi) + gp.samples[0].jitter_var - k**2 / a_var
    expect = s2 * vp.pdf(th) * np.exp(fbar)
    assert acq_pro(state, th) == pytest.approx(expect, rel=1e-10)


def test_pro_monotone_in_variance():
    state, gp, vp = make_state(N=6)
    th_far = np.array([2.8])   # larger predictive variance
    th_near = gp.training.points[0] + 1e-3
    _, s2 = gp.posterior_mean_var(np.vstack([th_far, th_near]))
    assert s2[0] > s2[1]


def test_npro_equals_pro_at_zero_noise():
    # All training noise at the floor ~ 0: construct with explicit zeros.
    state, gp, vp = make_state(N=5, noise_sd=0.0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        th = rng.uniform(-2, 2, 1)
        a_pro = acq_pro(state, th)
        sig2 = state.sigma_obs_at(th) ** 2
        fbar, s2 = gp.posterior_mean_var(th[None, :])
        expect = s2[0]**2 / (s2[0] + sig2) * vp.pdf(th) * np.exp(fbar[0])
        assert acq_npro(state, th) == pytest.approx(expect, rel=1e-12)
        # Floor noise is ~3e-3; the relative gap is s2/(s2+1e-5).
        assert acq_npro(state, th) <= a_pro + 1e-15


def test_npro_ratios():
    state, gp, vp = make_state(N=5)
    th = np.array([0.7])
    fbar, s2 = gp.posterior_mean_var(th[None, :])
    sig = state.sigma_obs_at(th)
    a_pro = acq_pro(state, th)
    a_npro = acq_npro(state, th)
    assert a_npro == pytest.approx(a_pro * s2[0] / (s2[0] + sig**2),
                                   rel=1e-10)
    # sigma_obs -> infinity: direct formula limit is 0.
    assert s2[0]**2 / (s2[0] + 1e12) * vp.pdf(th) < 1e-10


# -- EIG --------------------------------------------------------------------


def test_eig_nonnegative_and_zero_iff_rho_zero():
    state, _, _ = make_state(D=2, N=6, K=2, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(50):
        th = rng.uniform(-3, 3, 2)
        assert acq_eig(state, th) >= 0.0
    far = np.full(2, 50.0)
    assert acq_eig(state, far) == pytest.approx(0.0, abs=1e-9)


def test_eig_arithmetic():
    rho = 0.8
    assert -0.5 * np.log(1 - rho**2) == pytest.approx(0.5108, abs=1e-4)


def test_eig_monotone_in_rho():
    vals = [-0.5 * np.log(1 - r**2) for r in (0.1, 0.5, 0.9)]
    assert vals[0] < vals[1] < vals[2]


# -- VIQR / IMIQR -----------------------------------------------------------


def test_viqr_uninformative_candidate_no_gain():
    state, gp, _ = make_state(N=5, seed=5)
    # A candidate far outside: covariance with cached samples ~ 0, so the
    # reduction is ~ 0 (equivalently the raw objective stays at baseline).
    far = np.array([9.0])
    assert acq_viqr(state, far) == pytest.approx(0.0, abs=1e-6)


def test_viqr_hand_computed_single_cache():
    state, gp, vp = make_state(D=1, N=1, noise_sd=0.3, n_viqr=1, seed=6)
    th = np.array([0.1])
    c = gp.samples[0]
    psi = c.psi
    ts0 = gp.training.points[0]
    s_cache = state.viqr_cache[0]
    a_var = (kernel(ts0, ts0, psi) + c.jitter_var + psi.noise_base_var
             + gp.training.noise_sd[0] ** 2)

    def post_cov(a, b):
        return (kernel(a, b, psi) + (c.jitter_var if a is b else 0.0)
                - kernel(a, ts0, psi) * kernel(ts0, b, psi) / a_var)

    s2_cache = kernel(s_cache, s_cache, psi) + c.jitter_var \
        - kernel(s_cache, ts0, psi)**2 / a_var
    c_cross = post_cov(s_cache, th)
    c_self = kernel(th, th, psi) + c.jitter_var \
        - kernel(th, ts0, psi)**2 / a_var
    sig2 = gp.training.noise_sd[0] ** 2  # nearest-neighbor estimate
    s2_new = s2_cache - c_cross**2 / (c_self + psi.noise_base_var + sig2)
    u = norm.ppf(0.75)
    expect = 2 * (np.sinh(u * np.sqrt(s2_cache))
                  - np.sinh(u * np.sqrt(max(s2_new, 0.0))))
    assert acq_viqr(state, th) == pytest.approx(expect, rel=1e-8)


def test_viqr_deterministic_fixed_cache():
    state, _, _ = make_state(N=5, seed=7)
    th = np.array([0.33])
    assert acq_viqr(state, th) == acq_viqr(state, th)


def test_viqr_mc_convergence_rate():
    state, gp, vp = make_state(N=5, seed=100)
    th = np.array([0.5])
    sds = []
    for n in (25, 100, 400):
        vals = []
        for i in range(60):
            rng = np.random.default_rng(1000 + i)
            state.n_viqr = n
            state.viqr_cache = vp.sample(n, rng)
            state._precompute_cache("viqr")
            vals.append(acq_viqr(state, th))
        sds.append(np.std(vals))
    # SD should shrink roughly like 1/sqrt(n): factor ~2 per 4x samples.
    assert sds[1] < 0.7 * sds[0]
    assert sds[2] < 0.7 * sds[1]


def test_imiqr_uniform_weights_match_viqr_ranking():
    state, gp, vp = make_state(D=1, N=5, seed=8, kind="imiqr")
    # Force uniform weights and a shared sample set: rankings must agree.
    state.imiqr_weights = np.full(state.n_imiqr, 1.0 / state.n_imiqr)
    state.viqr_cache = state.imiqr_cache
    state._precompute_cache("viqr")
    cands = np.linspace(-2, 2, 11)[:, None]
    v = state.batch_viqr(cands)
    im = state.batch_imiqr(cands)
    assert np.array_equal(np.argsort(v), np.argsort(im))


def test_imiqr_degenerate_weights_fallback():
    # A needle-sharp prior mean makes one importance weight carry all the
    # mass; the weights must fall back to uniform.
    rng = np.random.default_rng(9)
    state, gp, vp = make_state(
        D=1, N=2, seed=9, kind="imiqr",
        psi_overrides={"log_omega": np.log([1e-3]),
                       "theta_m": np.zeros(1), "m0": 0.0})
    assert state.imiqr_degenerate
    assert np.allclose(state.imiqr_weights, 1.0 / state.n_imiqr)


def test_imiqr_shift_invariant_weights():
    # Shifting all observed values leaves the self-normalized weights alone.
    _, gp, vp = make_state(D=1, N=5, seed=9, kind="imiqr")
    state = AcquisitionState.create(gp, vp, make_space(1),
                                    np.random.default_rng(9), kind="imiqr")
    ts2 = gp.training.shifted(-1000.0)
    psi2 = gp.samples[0].psi
    vec2 = psi2.vec.copy()
    vec2[3] -= 1000.0  # shift the mean-function level with the data
    psi2 = type(psi2)(vec2)
    gp2 = GpModel(ts2, [_factorize(ts2, psi2)])
    st2 = AcquisitionState.create(gp2, vp, make_space(1),
                                  np.random.default_rng(9), kind="imiqr")
    assert np.allclose(st2.imiqr_weights, state.imiqr_weights)


def test_imiqr_viqr_both_find_positive_gain():
    for seed in range(3):
        state, gp, vp = make_state(D=2, N=12, K=2, seed=20 + seed,
                                   kind="imiqr")
        th_v, dv = optimize_acq(state, "viqr", np.random.default_rng(30))
        th_i, di = optimize_acq(state, "imiqr", np.random.default_rng(30))
        assert acq_viqr(state, th_v) > 0
        assert acq_imiqr(state, th_i) > 0
        assert not dv["all_regularized_out"]
        assert not di["all_regularized_out"]


# -- regularizers -----------------------------------------------------------


def test_regularizer_var_off():
    state, _, _ = make_state(N=3, seed=11)
    th = np.array([2.5])  # far from data: large variance
    assert regularize(1.0, state, th) == pytest.approx(1.0)


def test_regularizer_var_arithmetic():
    # V = V_reg / 2 gives b_var = exp(-(2 - 1)) = 1/e.
    v_reg = 1e-4
    v = v_reg / 2
    assert np.exp(-(v_reg / v - 1.0)) == pytest.approx(np.exp(-1.0))


def test_regularizer_bound_zero():
    state, _, _ = make_state(N=3, seed=12)
    space = state.space
    edge_x = space.lb + 1e-7 * (space.ub - space.lb)
    th = space.to_inference(edge_x)
    assert regularize(5.0, state, th) == 0.0


# -- optimizer --------------------------------------------------------------


def test_optimize_refinement_beats_candidates():
    state, _, _ = make_state(D=1, N=6, K=1, seed=13)
    rng = np.random.default_rng(14)
    th, diag = optimize_acq(state, "pro", rng)
    # Compare against a fresh candidate sweep.
    cands = np.linspace(-3, 3, 200)[:, None]
    best_cand = np.max(state.batch_log_objective(cands, "pro"))
    val = state.batch_log_objective(th[None, :], "pro")[0]
    assert val >= best_cand - 1e-6


def test_optimize_determinism():
    state, _, _ = make_state(D=2, N=6, seed=15)
    a, _ = optimize_acq(state, "viqr", np.random.default_rng(16))
    b, _ = optimize_acq(state, "viqr", np.random.default_rng(16))
    assert np.array_equal(a, b)


def test_optimize_matches_dense_grid_pro():
    state, _, _ = make_state(D=1, N=8, seed=17)
    rng = np.random.default_rng(18)
    th, _ = optimize_acq(state, "pro", rng)
    grid = np.linspace(-4, 4, 8001)[:, None]
    vals = state.batch_log_objective(grid, "pro")
    best = grid[int(np.argmax(vals)), 0]
    assert abs(th[0] - best) < 1e-3


def test_viqr_faster_than_imiqr_per_evaluation():
    import time
    state, _, _ = make_state(D=2, N=40, K=2, seed=19, kind="imiqr")
    cands = np.random.default_rng(20).uniform(-2, 2, (200, 2))
    state.batch_viqr(cands); state.batch_imiqr(cands)  # warm-up

    def best_of(fn, reps=3):
        ts = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(cands)
            ts.append(time.perf_counter() - t0)
        return min(ts)

    assert best_of(state.batch_viqr) < best_of(state.batch_imiqr)
