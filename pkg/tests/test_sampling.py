import numpy as np
import pytest

from vbmc.sampling import slice_sample_mcmc


def test_standard_normal_moments():
    rng = np.random.default_rng(0)
    log_target = lambda x: -0.5 * float(x @ x)
    s = slice_sample_mcmc(log_target, np.zeros(1), 20_000,
                          np.ones(1), rng)
    # Slice samples are correlated; allow a generous CLT margin.
    assert abs(s.mean()) < 4.0 / np.sqrt(2000)
    assert s.std() == pytest.approx(1.0, rel=0.05)


def test_bounded_support_respected():
    rng = np.random.default_rng(1)

    def log_target(x):
        if not (0.0 < x[0] < 1.0):
            return -np.inf
        return 0.0

    s = slice_sample_mcmc(log_target, np.array([0.5]), 2000,
                          np.ones(1), rng)
    assert np.all((s > 0) & (s < 1))


def test_seed_determinism():
    log_target = lambda x: -0.5 * float(x @ x)
    a = slice_sample_mcmc(log_target, np.zeros(2), 200, np.ones(2),
                          np.random.default_rng(42))
    b = slice_sample_mcmc(log_target, np.zeros(2), 200, np.ones(2),
                          np.random.default_rng(42))
    assert np.array_equal(a, b)


def test_nonfinite_start_rejected():
    with pytest.raises(ValueError):
        slice_sample_mcmc(lambda x: -np.inf, np.zeros(1), 10,
                          np.ones(1), np.random.default_rng(0))
