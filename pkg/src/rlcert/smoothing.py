"""Gaussian smoothing of Q-functions.

The smoothed value of action ``a`` at ``s`` is ``E[Q(s + D, a)]`` with
``D ~ N(0, sigma^2 I)``.  It is estimated by Monte Carlo with one-sided
Hoeffding bounds, or computed exactly for piecewise-constant :class:`GridQ`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .qfunc import GridQ, UnsupportedError, evaluate

PROB_FLOOR = 1e-9
MIN_RANGE = 1e-6
MAX_EXACT_CELLS = 10**6


class DomainError(ValueError):
    pass


class ResourceError(RuntimeError):
    pass


def std_normal_cdf(x):
    return ndtr(x)


def std_normal_inv_cdf(p):
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)) or np.any(np.isnan(p_arr)):
        raise DomainError(f"inverse normal CDF needs p strictly inside (0, 1), got {p}")
    out = ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def clamp_prob(p):
    """Clamp probabilities to [1e-9, 1 - 1e-9] before inverting the CDF."""
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


# -- counter-based noise -------------------------------------------------------

def stream_id(key: str) -> int:
    """Map a hex state key onto an integer noise-stream id."""
    return int(key[:16], 16)


def _philox(seed: int, stream: Sequence[int]) -> np.random.Philox:
    words = [int(seed)] + [int(s) for s in stream]
    if any(w < 0 for w in words):
        raise ValueError("seed and stream ids must be non-negative")
    key = np.random.SeedSequence(words).generate_state(2, dtype=np.uint64)
    return np.random.Philox(key=key)


def gaussian_noise(seed: int, stream: Sequence[int], count: int, dim: int, start: int = 0) -> np.ndarray:
    """Standard normals for samples ``start .. start+count`` of one stream.

    Value ``(i, d)`` is a pure function of ``(seed, stream, i, d)``: it is the
    ``(i * dim + d)``-th 64-bit word of a Philox counter stream mapped through
    the inverse normal CDF, so any partition of the sample range reproduces
    the same numbers.
    """
    if count <= 0:
        return np.zeros((0, dim))
    bitgen = _philox(seed, stream)
    block, offset = divmod(start * dim, 4)  # Philox emits 4 words per counter step
    if block:
        bitgen.advance(block)
    raw = bitgen.random_raw(count * dim + offset)[offset:]
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(u).reshape(count, dim)


# -- configuration and results -------------------------------------------------

@dataclass(frozen=True)
class SmoothingConfig:
    sigma: float
    m: int = 10_000
    alpha: float = 0.05
    v_min: float = 0.0
    v_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"m must be an integer >= 2, got {self.m}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.v_min < self.v_max:
            raise ValueError(f"need v_min < v_max, got ({self.v_min}, {self.v_max})")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")

    @property
    def value_range(self) -> float:
        return self.v_max - self.v_min

    def with_range(self, v_min: float, v_max: float) -> "SmoothingConfig":
        return replace(self, v_min=float(v_min), v_max=float(v_max))


@dataclass(frozen=True)
class SmoothedEstimate:
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    m_used: int
    order: np.ndarray = field(repr=False)  # actions by descending mean, lowest index first on ties

    @property
    def top_action(self) -> int:
        return int(self.order[0])

    @property
    def runner_up(self) -> int | None:
        return int(self.order[1]) if len(self.order) > 1 else None

    @classmethod
    def from_mean(cls, mean, delta: float, v_min: float, v_max: float, m_used: int) -> "SmoothedEstimate":
        mean = np.asarray(mean, dtype=float)
        lower = np.clip(mean - delta, v_min, v_max)
        upper = np.clip(mean + delta, v_min, v_max)
        return cls(mean, lower, upper, int(m_used), np.argsort(-mean, kind="stable"))


def hoeffding_delta(m: int, alpha: float, value_range: float) -> float:
    """One-sided Hoeffding half-width for the mean of ``m`` samples in a range."""
    if m < 1 or not 0.0 < alpha < 1.0 or value_range < 0:
        raise ValueError("need m >= 1, alpha in (0, 1) and a non-negative range")
    return value_range * math.sqrt(math.log(1.0 / alpha) / (2.0 * m))


def _sample_mean(values: np.ndarray) -> np.ndarray:
    # centred on the first sample: constant inputs come back exactly
    base = values[0]
    return base + (values - base).mean(axis=0)


def smooth_q_mc(q, obs, cfg: SmoothingConfig, stream: Sequence[int] = (0,)) -> SmoothedEstimate:
    """Monte Carlo smoothed Q-values with one shared noise batch for all actions."""
    obs = np.asarray(obs, dtype=float)
    noise = gaussian_noise(cfg.seed, stream, cfg.m, obs.size)
    values = evaluate(q, obs + cfg.sigma * noise, clip=(cfg.v_min, cfg.v_max))
    delta = hoeffding_delta(cfg.m, cfg.alpha, cfg.value_range)
    return SmoothedEstimate.from_mean(_sample_mean(values), delta, cfg.v_min, cfg.v_max, cfg.m)


def _interval_probs(z_lo, z_hi):
    """P[z_lo <= Z < z_hi] for standard normal Z, accurate in both tails."""
    upper_side = ndtr(-z_lo) - ndtr(-z_hi)
    lower_side = ndtr(z_hi) - ndtr(z_lo)
    return np.where(z_lo >= 0, upper_side, lower_side)


def cell_probabilities(q: GridQ, obs, sigma: float) -> list[np.ndarray]:
    """Per-dimension probabilities that ``obs + N(0, sigma^2 I)`` lands in each cell."""
    x = np.atleast_2d(np.asarray(obs, dtype=float))
    probs = []
    for d, edges in enumerate(q.cell_edges):
        bounds = np.concatenate([[-np.inf], edges, [np.inf]])
        z = (bounds[None, :] - x[:, d:d + 1]) / sigma
        probs.append(_interval_probs(z[:, :-1], z[:, 1:]))
    return probs


def smooth_q_exact(q, obs, sigma: float, clip: tuple[float, float] | None = None,
                   max_cells: int = MAX_EXACT_CELLS) -> np.ndarray:
    """Exact smoothed values of a :class:`GridQ` (single obs or a batch)."""
    if not isinstance(q, GridQ):
        raise UnsupportedError("exact smoothing is only available for GridQ")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    n_cells = int(np.prod(q.cell_shape))
    if n_cells > max_cells:
        raise ResourceError(f"GridQ has {n_cells} cells, above the exact-smoothing cap of {max_cells}")
    table = q.table if clip is None else np.clip(q.table, *clip)
    probs = cell_probabilities(q, obs, sigma)
    out = np.einsum("bi,i...->b...", probs[0], table)
    for p in probs[1:]:
        out = np.einsum("bi,bi...->b...", p, out)
    return out[0] if np.asarray(obs).ndim == 1 else out


def exact_estimate(q: GridQ, obs, cfg: SmoothingConfig) -> SmoothedEstimate:
    """Estimate built from exact smoothed values: zero sampling slack."""
    mean = smooth_q_exact(q, obs, cfg.sigma, clip=(cfg.v_min, cfg.v_max))
    return SmoothedEstimate.from_mean(mean, 0.0, cfg.v_min, cfg.v_max, 0)


class MonteCarloSmoother:
    """Smoothed-policy oracle backed by Monte Carlo sampling."""

    exact = False

    def __init__(self, q, cfg: SmoothingConfig):
        self.q = q
        self.cfg = cfg

    def estimate(self, obs, stream: Sequence[int] = (0,)) -> SmoothedEstimate:
        return smooth_q_mc(self.q, obs, self.cfg, stream)

    def means(self, obs_batch, stream: Sequence[int] = (0,)) -> np.ndarray:
        """Smoothed means for several observations under common noise."""
        obs_batch = np.atleast_2d(np.asarray(obs_batch, dtype=float))
        noise = self.cfg.sigma * gaussian_noise(self.cfg.seed, stream, self.cfg.m, obs_batch.shape[1])
        clip = (self.cfg.v_min, self.cfg.v_max)
        return np.array([_sample_mean(evaluate(self.q, x + noise, clip=clip)) for x in obs_batch])


class ExactSmoother:
    """Smoothed-policy oracle for :class:`GridQ` using closed-form smoothing."""

    exact = True

    def __init__(self, q: GridQ, cfg: SmoothingConfig):
        if not isinstance(q, GridQ):
            raise UnsupportedError("ExactSmoother requires a GridQ")
        self.q = q
        self.cfg = cfg

    def estimate(self, obs, stream=None) -> SmoothedEstimate:
        return exact_estimate(self.q, obs, self.cfg)

    def means(self, obs_batch, stream=None) -> np.ndarray:
        return smooth_q_exact(self.q, np.atleast_2d(obs_batch), self.cfg.sigma,
                              clip=(self.cfg.v_min, self.cfg.v_max))


def make_smoother(q, cfg: SmoothingConfig, exact: bool = False):
    return ExactSmoother(q, cfg) if exact else MonteCarloSmoother(q, cfg)


def estimate_range(env, q, episodes: int, cfg: SmoothingConfig | None = None,
                   horizon: int | None = None, seed: int | None = None) -> tuple[float, float]:
    """Range of raw Q-values over states visited by greedy rollouts.

    Every action's value is recorded at each visited state.  A range narrower
    than 1e-6 is widened symmetrically to exactly 2e-6.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    H = env.spec.horizon if horizon is None else int(horizon)
    base_seed = (cfg.seed if cfg is not None else 0) if seed is None else int(seed)
    lo, hi = math.inf, -math.inf
    for ep in range(episodes):
        obs = env.reset(base_seed + ep)
        for _ in range(H):
            vals = np.asarray(q(obs), dtype=float)
            lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
            res = env.step(int(np.argmax(vals)))
            obs = res.observation
            if res.done:
                break
    if hi - lo < MIN_RANGE:
        mid = 0.5 * (lo + hi)
        lo, hi = mid - MIN_RANGE, mid + MIN_RANGE
    return lo, hi
