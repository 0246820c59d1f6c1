import math
from fractions import Fraction
from math import comb

import numpy as np
import pytest
from scipy.stats import binom

from rlcert.cert_global import (TrajectoryReturns, binomial_log_cdf, certify_global, compute_order_stats,
                                expectation_bound, p_prime, percentile_bound, reward_lipschitz,
                                sample_randomized_trajectories)
from rlcert.env import EnvSpec
from rlcert.smoothing import DomainError, hoeffding_delta


def spec_with(j_max, H=100):
    return EnvSpec(1, 2, H, 1.0, (0.0, 1.0), (0.0, float(j_max)), True, ((0.0, 1.0),))


def brute_order_stat(m, pp, alpha):
    """Largest k with sum_{i<k} C(m,i) p'^i (1-p')^(m-i) <= alpha, exact rationals."""
    p = Fraction(pp)
    a = Fraction(alpha)
    best, cdf = None, Fraction(0)
    for k in range(1, m + 1):
        cdf += comb(m, k - 1) * p ** (k - 1) * (1 - p) ** (m - k + 1)
        if cdf <= a:
            best = k
        else:
            break
    return best


def test_lipschitz_unit():
    assert reward_lipschitz(1.0, math.sqrt(2 / math.pi)) == pytest.approx(1.0, rel=1e-15)


def test_expectation_examples():
    tr = TrajectoryReturns(np.full(50, 3.0), sigma=1.0, H=4, seed=0)
    spec = spec_with(4, H=4)
    assert expectation_bound(tr, 0.0, 0.05, spec) == pytest.approx(3.0 - hoeffding_delta(50, 0.05, 4.0))
    # mean 90, Hoeffding slack 2 (range 100, m=1250, alpha=1/e), L = 79.7885, eps*sqrt(H) = 0.1
    returns = np.array([80.0, 100.0] * 625)
    tr = TrajectoryReturns(returns, sigma=1.0, H=100, seed=0)
    assert expectation_bound(tr, 0.01, math.exp(-1), spec_with(100)) == pytest.approx(80.0212, abs=1e-3)


def test_p_prime():
    assert p_prime(0.3, 0.0, 10, 1.0) == 0.3
    assert p_prime(0.5, 0.1, 100, 2.0) == pytest.approx(0.308538, abs=1e-6)
    assert p_prime(0.5, 100.0, 100, 0.1) < 1e-300
    for p in (0.0, 1.0):
        with pytest.raises(ValueError):
            p_prime(p, 0.1, 10, 1.0)


def test_order_stats_examples():
    assert compute_order_stats(10, 0.5, 0.05) == 2
    assert compute_order_stats(10, 0.01, 0.05) is None
    assert compute_order_stats(10, 0.5, 1 - 1e-12) == 10


def test_order_stats_match_bruteforce_grid():
    rng = np.random.default_rng(0)
    cases = [(10, 0.5, 0.05)]
    while len(cases) < 200:
        cases.append((int(rng.integers(1, 300)), float(rng.uniform(0.001, 0.999)), float(rng.uniform(0.001, 0.5))))
    for m, pp, a in cases:
        assert compute_order_stats(m, pp, a, "exact") == brute_order_stat(m, pp, a), (m, pp, a)


def test_binomial_log_cdf_against_fraction():
    m, p = 40, 0.3
    cdf = np.exp(binomial_log_cdf(m, p))
    exact = np.cumsum([float(comb(m, i) * Fraction(p) ** i * (1 - Fraction(p)) ** (m - i)) for i in range(m + 1)])
    np.testing.assert_allclose(cdf, exact, rtol=1e-11)


def test_normal_mode_close():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = int(rng.integers(1000, 20000))
        pp = float(rng.uniform(0.1, 0.9))
        a = float(rng.uniform(0.01, 0.2))
        ke, kn = compute_order_stats(m, pp, a, "exact"), compute_order_stats(m, pp, a, "normal")
        assert abs(ke - kn) <= 3


def test_percentile_bound_median_order():
    rng = np.random.default_rng(2)
    tr = TrajectoryReturns(rng.normal(size=10_000), sigma=1.0, H=1, seed=0)
    cert = percentile_bound(tr, 0.5, 0.0, 0.05)
    cdf = binom.cdf(np.arange(10_000), 10_000, 0.5)  # cdf[k-1] = P[Bin <= k-1]
    k_oracle = int(np.flatnonzero(cdf <= 0.05)[-1]) + 1
    assert cert.order_index == k_oracle and 4800 < k_oracle < 5000
    assert cert.percentile_bound == np.sort(tr.returns)[k_oracle - 1]
    assert cert.percentile_bound <= np.median(tr.returns)


def test_percentile_constant_and_ceiling():
    tr = TrajectoryReturns(np.full(100, 2.5), sigma=0.5, H=4, seed=0)
    assert percentile_bound(tr, 0.5, 0.01, 0.05).percentile_bound == 2.5
    cert = percentile_bound(tr, 0.5, 5.0, 0.05)
    assert cert.percentile_bound is None and cert.order_index is None and cert.p_prime < 1e-10


def test_bounds_nonincreasing(freeway_env_q):
    env, q = freeway_env_q
    env.reset(0)
    tr = sample_randomized_trajectories(env, q, 0.2, 500, seed=3)
    eps = np.linspace(0, 0.3, 13)
    certs = certify_global(tr, env.spec, eps)
    e = [c.expectation_bound for c in certs]
    # an absent percentile bound sits below every present one
    p = [c.percentile_bound if c.percentile_bound is not None else -1.0 for c in certs]
    assert np.all(np.diff(e) <= 0) and np.all(np.diff(p) <= 0)
    assert all(c.expectation_bound <= tr.returns.max() for c in certs)


def test_sampling_sigma_zero_and_determinism(grid_env_q):
    env, q = grid_env_q
    env.reset(0)
    tr = sample_randomized_trajectories(env, q, 0.0, 20)
    assert np.all(tr.returns == 1.0)
    a = sample_randomized_trajectories(env, q, 0.15, 200, seed=5)
    b = sample_randomized_trajectories(env, q, 0.15, 200, seed=5)
    np.testing.assert_array_equal(a.returns, b.returns)
    assert env.observation().tolist() == [0.1, 0.1]  # source env untouched


def test_sampling_perturbations_shift_observations(grid_env_q):
    env, q = grid_env_q
    env.reset(0)
    # push every observation far off the board: the off-box cells are tied, action 0 forever
    pert = np.full((env.spec.horizon, 2), -5.0)
    tr = sample_randomized_trajectories(env, q, 0.0, 5, perturbations=pert)
    assert np.all(tr.returns == 0.0)


@pytest.mark.slow
def test_sampling_mean_matches_large_reference(grid_env_q):
    env, q = grid_env_q
    env.reset(0)
    small = sample_randomized_trajectories(env, q, 0.2, 1000, seed=11)
    ref = sample_randomized_trajectories(env, q, 0.2, 100_000, seed=12)
    assert abs(small.returns.mean() - ref.returns.mean()) <= hoeffding_delta(1000, 0.05, 1.0)
