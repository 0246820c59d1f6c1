"""Per-state action certification for the locally smoothed policy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri

from .smoothing import SmoothedEstimate, SmoothingConfig, clamp_prob, make_smoother

# noise-stream tag for per-step smoothing along an executed episode
STREAM_EPISODE = 1


@dataclass(frozen=True)
class ActionCertificate:
    t: int
    chosen_action: int
    radius: float
    extended_radii: np.ndarray
    estimate: SmoothedEstimate


def radius_between(value_top: float, value_other: float, sigma: float, v_min: float, v_max: float) -> float:
    """Certified l2 radius separating two smoothed values; 0 when not separated."""
    if value_top <= value_other:
        return 0.0
    span = v_max - v_min
    p_top = clamp_prob((value_top - v_min) / span)
    p_other = clamp_prob((value_other - v_min) / span)
    return max(0.0, 0.5 * sigma * float(ndtri(p_top) - ndtri(p_other)))


def extended_radii(est: SmoothedEstimate, cfg: SmoothingConfig) -> np.ndarray:
    """Radii ``r^0 = 0 <= r^1 <= ... <= r^{|A|-1}``.

    ``r^k`` compares the lower bound of the top action with the upper bound of
    the (k+1)-th best action, ranked by smoothed mean.
    """
    top = est.order[0]
    radii = [0.0]
    for a in est.order[1:]:
        radii.append(radius_between(est.lower[top], est.upper[a], cfg.sigma, cfg.v_min, cfg.v_max))
    # ranking is by mean, bounds are mean -/+ a common slack, so this is already sorted;
    # the running max only absorbs rounding in the clamped tails
    return np.maximum.accumulate(np.array(radii))


def certified_radius(est: SmoothedEstimate, cfg: SmoothingConfig) -> float:
    if len(est.mean) < 2:
        return math.inf
    return float(extended_radii(est, cfg)[1])


def certify_state(est: SmoothedEstimate, cfg: SmoothingConfig, t: int = 0) -> ActionCertificate:
    radii = extended_radii(est, cfg)
    radius = float(radii[1]) if len(radii) > 1 else math.inf
    return ActionCertificate(t, est.top_action, radius, radii, est)


def certify_episode(env, q, cfg: SmoothingConfig, H: int | None = None, exact: bool = False,
                    smoother=None) -> tuple[list[ActionCertificate], float]:
    """Run the smoothed policy for up to ``H`` steps from the env's current state.

    The greedy smoothed action is taken at every step whether or not it is
    certified.  Returns the per-step certificates and the undiscounted return.
    """
    H = env.spec.horizon if H is None else int(H)
    smoother = smoother or make_smoother(q, cfg, exact=exact)
    certs: list[ActionCertificate] = []
    total = 0.0
    if H <= 0:
        return certs, total
    obs = env.observation()
    for t in range(H):
        est = smoother.estimate(obs, stream=(STREAM_EPISODE, t))
        cert = certify_state(est, cfg, t)
        certs.append(cert)
        res = env.step(cert.chosen_action)
        total += res.reward
        obs = res.observation
        if res.done:
            break
    return certs, total


def certified_ratio(certs: Sequence[ActionCertificate], r: float) -> float:
    """Fraction of steps whose certified radius is at least ``r``."""
    if not certs:
        raise ValueError("certified_ratio needs at least one certificate")
    return sum(c.radius >= r for c in certs) / len(certs)
