import numpy as np
import pytest

from vbmc.engine import (EngineOptions, IterationRecord, VbmcResult,
                         hpd_noise_sd, initial_design, reliability_index,
                         run_vbmc, uncertainty_scale)
from vbmc.gp import TrainingSet
from vbmc.spaces import DomainError, ParamSpace
from vbmc.targets import NoisyEvaluation, TargetError, emulated_noisy


def make_space(D=2, half=5.0):
    return ParamSpace(np.full(D, -half), np.full(D, half),
                      np.full(D, -half / 2), np.full(D, half / 2))


# -- reliability arithmetic -------------------------------------------------


def test_reliability_all_ones():
    r, r1, r2, r3 = reliability_index(
        elbo_t=1.5, elbo_prev=1.0, elbo_sd=0.5, kl_prev=0.01 * np.sqrt(4),
        delta_sd=0.5, D=4)
    assert (r1, r2, r3) == (1.0, 1.0, 1.0)
    assert r == 1.0


def test_reliability_first_iteration_sentinel():
    r, r1, r2, r3 = reliability_index(1.0, np.nan, 0.1, 0.0, 0.5, 2)
    assert np.isinf(r) and np.isinf(r1)


def test_uncertainty_scale_examples():
    ts = TrainingSet(1)
    # Single point: hpd noise is its own noise SD.
    ts.add(np.zeros(1), 0.0, 2.5)
    assert hpd_noise_sd(ts) == 2.5
    assert uncertainty_scale(ts) == pytest.approx(np.sqrt(0.1 * 2.5))
    ts2 = TrainingSet(1)
    ts2.add(np.zeros(1), 0.0, 0.0)
    assert uncertainty_scale(ts2) == 0.1  # clamped below
    ts3 = TrainingSet(1)
    ts3.add(np.zeros(1), 0.0, 100.0)
    assert uncertainty_scale(ts3) == 1.0  # clamped above


def test_hpd_noise_uses_top_fraction():
    ts = TrainingSet(1)
    for i in range(10):
        # Highest two values carry noise 9 and 8.
        ts.add(np.array([float(i)]), float(i), float(i))
    assert hpd_noise_sd(ts, frac=0.2) == pytest.approx(8.5)


# -- initial design ---------------------------------------------------------


def test_initial_design_in_plausible_box():
    space = make_space(3)
    rng = np.random.default_rng(0)
    pts = initial_design(space, 10, rng)
    lo, hi = space.plausible_box_inference()
    assert pts.shape == (10, 3)
    assert np.all(pts >= lo) and np.all(pts <= hi)
    assert np.allclose(pts[0], 0.5 * (lo + hi))


def test_initial_design_deterministic():
    space = make_space(2)
    a = initial_design(space, 8, np.random.default_rng(1))
    b = initial_design(space, 8, np.random.default_rng(1))
    assert np.array_equal(a, b)


def test_initial_design_includes_x0():
    space = make_space(2)
    x0 = np.array([1.0, -2.0])
    pts = initial_design(space, 5, np.random.default_rng(2), x0=x0)
    assert np.allclose(space.from_inference(pts[1]), x0, atol=1e-8)


def test_initial_design_too_small():
    with pytest.raises(DomainError):
        initial_design(make_space(1), 1, np.random.default_rng(0))


# -- full runs --------------------------------------------------------------


def gauss_target(rng, sigma_obs=0.5):
    def loglik(x):
        return -0.5 * float(np.sum((x - 1.0) ** 2) / 0.5**2)

    return emulated_noisy(loglik, sigma_obs, 0.0, rng)


@pytest.fixture(scope="module")
def smoke_result():
    opts = EngineOptions(budget=60, seed=11, acq="viqr", vp_steps=200,
                         vp_steps_final=400)
    target = gauss_target(np.random.default_rng(123))
    return run_vbmc(target, make_space(2), opts)


def test_smoke_budget_contract(smoke_result):
    assert smoke_result.n_evals <= 60
    assert len(smoke_result.raw_y) == smoke_result.n_evals
    assert smoke_result.raw_x.shape == (smoke_result.n_evals, 2)


def test_smoke_posterior_quality(smoke_result):
    # True posterior ~ N(1, 0.5^2 I) well inside the box: the variational
    # mean should land within a few posterior SDs.
    space = smoke_result.space
    samp = space.from_inference(
        smoke_result.vp.sample(20_000, np.random.default_rng(0)))
    mean = samp.mean(axis=0)
    assert np.all(np.abs(mean - 1.0) < 0.5)
    sd = samp.std(axis=0)
    assert np.all(sd < 1.5)


def test_smoke_records_schema(smoke_result):
    recs = smoke_result.iterations
    assert len(recs) >= 1
    d = recs[0].as_dict()
    assert set(d) >= {"t", "evals", "elbo", "elbo_sd", "K", "r", "r1",
                      "r2", "r3", "whitened", "warmup", "wall_s"}
    assert np.isinf(recs[0].r)  # first iteration is never trusted
    assert recs[0].t == 1
    assert all(recs[i].evals <= recs[i + 1].evals
               for i in range(len(recs) - 1))


def test_smoke_warmup_component_count(smoke_result):
    recs = smoke_result.iterations
    for rec in recs:
        if rec.warmup:
            assert rec.K == 2


def test_engine_determinism():
    opts = EngineOptions(budget=35, seed=5, vp_steps=100, vp_steps_final=100,
                         whitening=False)
    r1 = run_vbmc(gauss_target(np.random.default_rng(7)), make_space(2), opts)
    r2 = run_vbmc(gauss_target(np.random.default_rng(7)), make_space(2), opts)
    a = [rec.as_dict() for rec in r1.iterations]
    b = [rec.as_dict() for rec in r2.iterations]
    for da, db in zip(a, b):
        for k in da:
            if isinstance(da[k], float) and np.isnan(da[k]):
                assert np.isnan(db[k])
            elif k != "wall_s":
                assert da[k] == db[k], k


def test_engine_unknown_acquisition():
    with pytest.raises(ValueError):
        run_vbmc(gauss_target(np.random.default_rng(0)), make_space(2),
                 EngineOptions(acq="nope"))


def test_engine_aborts_after_consecutive_failures():
    calls = {"n": 0}

    def target(x):
        calls["n"] += 1
        return NoisyEvaluation(0.0, 0.0, failed=True, message="boom")

    with pytest.raises(TargetError):
        run_vbmc(target, make_space(2), EngineOptions(budget=50, seed=0))


def test_engine_never_whitens_while_unreliable():
    # With whitening enabled, any iteration that flips `whitened` on must
    # follow an iteration whose r was below the unreliable threshold.
    opts = EngineOptions(budget=80, seed=3, vp_steps=150, vp_steps_final=150,
                         tau_vw=1)
    res = run_vbmc(gauss_target(np.random.default_rng(9)), make_space(2),
                   opts)
    recs = res.iterations
    for i in range(1, len(recs)):
        if recs[i].whitened and not recs[i - 1].whitened:
            assert recs[i].r1 is not None  # record exists; whitening was
            # applied inside iteration i, gated on that iteration's r.
            assert recs[i].warmup is False
