import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcdm.noise import EPS_T, alpha, alpha_prime, corrupt, nelbo_weight, sample_t

MASK = 256


@pytest.mark.parametrize("t, expected", [(0.0, 1.0), (1.0, 0.0), (0.25, 0.75)])
def test_alpha(t, expected):
    assert alpha(t) == expected


@pytest.mark.parametrize("t", [-0.1, 1.5])
def test_alpha_domain(t):
    with pytest.raises(ValueError):
        alpha(t)


@pytest.mark.parametrize("t, expected", [(0.5, 2.0), (1.0, 1.0), (0.001, 1000.0)])
def test_nelbo_weight(t, expected):
    assert nelbo_weight(t) == pytest.approx(expected, rel=1e-15)


def test_nelbo_weight_below_clamp():
    with pytest.raises(ValueError):
        nelbo_weight(EPS_T / 2)


def test_weight_is_minus_alpha_prime_over_one_minus_alpha():
    for t in (0.1, 0.37, 0.9):
        assert nelbo_weight(t) == pytest.approx(-alpha_prime(t) / (1 - alpha(t)), rel=1e-15)


def test_discrete_time_limit():
    T = 10**6
    for t in (0.2, 0.5, 0.9):
        ratio = T * (alpha(t) - alpha(t - 1.0 / T)) / alpha_prime(t)
        assert abs(ratio - 1.0) <= 1e-4


def test_full_mask_at_t_one(rng):
    b = corrupt(rng.integers(0, MASK, size=50), 1.0, rng, MASK)
    assert b.nu.all() and (b.z_t == MASK).all()


def test_same_seed_same_draw():
    x = np.arange(100) % 200
    a = corrupt(x, 0.4, np.random.default_rng(7), MASK)
    b = corrupt(x, 0.4, np.random.default_rng(7), MASK)
    assert np.array_equal(a.z_t, b.z_t) and np.array_equal(a.nu, b.nu)


def test_out_of_vocab_rejected(rng):
    with pytest.raises(ValueError):
        corrupt(np.array([1, MASK]), 0.5, rng, MASK)
    with pytest.raises(ValueError):
        corrupt(np.array([-1, 2]), 0.5, rng, MASK)


def test_mask_rate_binomial(rng):
    # 4-sigma binomial band over 2e4 positions
    n, t = 20_000, 0.3
    b = corrupt(rng.integers(0, MASK, size=(20, n // 20)), t, rng, MASK)
    assert abs(b.nu.mean() - t) <= 4 * np.sqrt(t * (1 - t) / n)


@given(st.integers(0, 2**32 - 1), st.floats(EPS_T, 1.0), st.integers(1, 40))
def test_batch_invariants(seed, t, L):
    rng = np.random.default_rng(seed)
    x = rng.integers(0, MASK, size=(3, L))
    b = corrupt(x, t, rng, MASK)
    masked = b.nu == 1
    assert np.array_equal(b.z_t == MASK, masked)
    assert np.array_equal(b.z_t[~masked], x[~masked])
    assert np.all(b.weight > 0) and np.allclose(b.weight, 1.0 / t)


def test_sample_t_range(rng):
    t = sample_t(10_000, rng)
    assert t.min() >= EPS_T and t.max() <= 1.0
