"""Reward certification by smoothing whole trajectories.

A sigma-randomized rollout feeds the base greedy policy one noisy copy of each
observation.  From ``m`` such returns we bound the expected return
(Lipschitz argument plus Hoeffding) and a percentile of the return (order
statistic chosen with an exact binomial tail).

These bounds hold against perturbation sequences fixed in advance.  They do
not cover an attacker that adapts to the sampled noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, ndtr

from .smoothing import gaussian_noise, hoeffding_delta, std_normal_inv_cdf

STREAM_GLOBAL = 2


@dataclass(frozen=True)
class TrajectoryReturns:
    returns: np.ndarray
    sigma: float
    H: int
    seed: int
    gamma: float = 1.0

    @property
    def m(self) -> int:
        return len(self.returns)

    @property
    def sorted(self) -> np.ndarray:
        return np.sort(self.returns)


@dataclass(frozen=True)
class GlobalCertificate:
    epsilon: float
    expectation_bound: float | None
    percentile_bound: float | None
    p: float
    p_prime: float
    order_index: int | None
    alpha: float
    m: int
    sigma: float


def sample_randomized_trajectories(env, q, sigma: float, m: int, H: int | None = None,
                                   gamma: float = 1.0, seed: int = 0,
                                   perturbations: np.ndarray | None = None) -> TrajectoryReturns:
    """Returns of ``m`` sigma-randomized rollouts from the env's current state.

    At step ``t`` rollout ``i`` acts greedily on ``s_t + delta_t + sigma * z``
    where ``z`` is sample ``i`` of noise stream ``(seed, t)`` and ``delta_t``
    is row ``t`` of the optional, pre-committed ``perturbations``.
    The rollouts advance in lockstep so Q is evaluated on a whole batch.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    H = env.spec.horizon if H is None else int(H)
    start = env.snapshot()
    n_runs = 1 if sigma == 0 else m
    envs = []
    for _ in range(n_runs):
        e = env.clone()
        e.restore(start)
        envs.append(e)
    obs = np.array([e.observation() for e in envs])
    returns = np.zeros(n_runs)
    active = np.ones(n_runs, dtype=bool)
    discount = 1.0
    for t in range(H):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        x = obs[idx]
        if perturbations is not None:
            x = x + perturbations[t]
        if sigma > 0:
            x = x + sigma * gaussian_noise(seed, (STREAM_GLOBAL, t), m, obs.shape[1])[idx]
        actions = np.argmax(np.atleast_2d(q(x)), axis=1)
        for i, a in zip(idx, actions):
            res = envs[i].step(int(a))
            returns[i] += discount * res.reward
            obs[i] = res.observation
            if res.done:
                active[i] = False
        discount *= gamma
    if sigma == 0:
        returns = np.full(m, returns[0])
    return TrajectoryReturns(returns, float(sigma), H, int(seed), float(gamma))


def reward_lipschitz(return_range: float, sigma: float) -> float:
    """Lipschitz constant of the smoothed return as a function of the perturbations."""
    return return_range / sigma * math.sqrt(2.0 / math.pi)


def expectation_bound(tr: TrajectoryReturns, eps: float, alpha: float, spec) -> float:
    if eps < 0:
        raise ValueError("eps must be >= 0")
    j_min, j_max = spec.episode_return_bounds
    span = j_max - j_min
    mean_lower = float(np.mean(tr.returns)) - hoeffding_delta(tr.m, alpha, span)
    if eps == 0:
        return mean_lower
    if tr.sigma == 0:
        return -math.inf
    return mean_lower - reward_lipschitz(span, tr.sigma) * eps * math.sqrt(tr.H)


def p_prime(p: float, eps: float, H: int, sigma: float) -> float:
    if not 0.0 < p < 1.0:
        raise ValueError(f"percentile p must lie in (0, 1), got {p}")
    if eps == 0:
        return float(p)
    if sigma == 0:
        return 0.0
    return float(ndtr(std_normal_inv_cdf(p) - eps * math.sqrt(H) / sigma))


def _largest_true(pred: Callable[[int], bool], lo: int, hi: int) -> int | None:
    """Largest k in [lo, hi] with pred(k), for pred true on a prefix."""
    if not pred(lo):
        return None
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if pred(mid):
            lo = mid
        else:
            hi = mid - 1
    return lo


def binomial_log_cdf(m: int, p: float) -> np.ndarray:
    """``log P[Bin(m, p) <= i]`` for ``i = 0..m``, accumulated in log space."""
    i = np.arange(m + 1)
    with np.errstate(divide="ignore"):
        log_p, log_q = math.log(p) if p > 0 else -np.inf, math.log1p(-p) if p < 1 else -np.inf
        terms = gammaln(m + 1) - gammaln(i + 1) - gammaln(m - i + 1)
        terms = terms + np.where(i > 0, i * log_p, 0.0) + np.where(m - i > 0, (m - i) * log_q, 0.0)
    return np.logaddexp.accumulate(terms)


def compute_order_stats(m: int, p_prime: float, alpha: float, mode: str = "exact") -> int | None:
    """Largest order index ``k`` (1-based) with ``P[Bin(m, p') <= k-1] <= alpha``.

    Returns None when even ``k = 1`` fails, i.e. no order statistic certifies
    the requested percentile.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    if mode == "exact":
        log_cdf = binomial_log_cdf(m, p_prime)
        log_alpha = math.log(alpha)
        return _largest_true(lambda k: log_cdf[k - 1] <= log_alpha, 1, m)
    if mode == "normal":
        mu = m * p_prime
        sd = math.sqrt(m * p_prime * (1.0 - p_prime))
        if sd == 0:
            # point mass at mu
            return _largest_true(lambda k: float(k - 1 >= mu) <= alpha, 1, m)
        return _largest_true(lambda k: ndtr((k - 1 + 0.5 - mu) / sd) <= alpha, 1, m)
    raise ValueError(f"mode must be 'exact' or 'normal', got {mode!r}")


def percentile_bound(tr: TrajectoryReturns, p: float, eps: float, alpha: float,
                     mode: str = "exact", spec=None) -> GlobalCertificate:
    pp = p_prime(p, eps, tr.H, tr.sigma)
    k = compute_order_stats(tr.m, pp, alpha, mode)
    value = float(tr.sorted[k - 1]) if k is not None else None
    exp_b = expectation_bound(tr, eps, alpha, spec) if spec is not None else None
    return GlobalCertificate(float(eps), exp_b, value, float(p), pp, k, float(alpha), tr.m, tr.sigma)


def certify_global(tr: TrajectoryReturns, spec, eps_grid: Sequence[float], p: float = 0.5,
                   alpha: float = 0.05, mode: str = "exact") -> list[GlobalCertificate]:
    return [percentile_bound(tr, p, float(e), alpha, mode, spec) for e in eps_grid]
