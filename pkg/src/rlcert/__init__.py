"""Certified robustness of Q-learning policies against per-step l2 observation noise.

Submodules:
    env                 deterministic reference environments with snapshot/restore
    qfunc               tabular and MLP Q-functions, value iteration, weight files
    smoothing           Gaussian smoothing of Q (Monte Carlo and exact grid oracle)
    cert_action         per-state certified radii of the smoothed policy
    cert_global         expectation and percentile bounds from randomized rollouts
    cert_local_reward   absolute reward bounds by adaptive tree search
    attack              empirical attacks for tightness checks
    cli                 config-driven runner and report builder
"""

__version__ = "0.1.0"

from .env import GridWorld, PoleBalance, ToyFreeway, make_env
from .qfunc import GridQ, MlpQ, value_iteration
from .smoothing import SmoothingConfig, estimate_range, make_smoother, smooth_q_mc
from .cert_action import certify_episode, certified_radius, extended_radii
from .cert_global import certify_global, sample_randomized_trajectories
from .cert_local_reward import certify as certify_reward_local
from .attack import AttackConfig, pgd_attack_episode, random_attack_episode

__all__ = [
    "GridWorld", "PoleBalance", "ToyFreeway", "make_env",
    "GridQ", "MlpQ", "value_iteration",
    "SmoothingConfig", "estimate_range", "make_smoother", "smooth_q_mc",
    "certify_episode", "certified_radius", "extended_radii",
    "certify_global", "sample_randomized_trajectories",
    "certify_reward_local",
    "AttackConfig", "pgd_attack_episode", "random_attack_episode",
]
