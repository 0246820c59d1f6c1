"""Empirical l2 attacks used to check how tight the certificates are."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cert_action import STREAM_EPISODE
from .qfunc import MlpQ, UnsupportedError
from .smoothing import SmoothingConfig, gaussian_noise, make_smoother

STREAM_ATTACK = 4


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    steps: int = 10
    trials: int = 32
    target: str = "smoothed"  # "smoothed" attacks the smoothed policy, "raw" the base greedy policy
    seed: int = 0
    step_size: float | None = None
    grad_samples: int = 256  # noise samples per gradient of the smoothed objective

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1 or self.trials < 1:
            raise ValueError("steps and trials must be >= 1")
        if self.target not in ("smoothed", "raw"):
            raise ValueError(f"target must be 'smoothed' or 'raw', got {self.target!r}")


@dataclass(frozen=True)
class AttackResult:
    ret: float
    perturbations: np.ndarray  # (T, N)
    actions: np.ndarray  # (T,)


def _scorer(q, cfg_attack: AttackConfig, cfg_smooth: SmoothingConfig | None, exact: bool, smoother):
    """Callable (obs_batch, t) -> action scores of the attacked policy."""
    if cfg_attack.target == "raw":
        return lambda batch, t: np.atleast_2d(q(batch))
    if smoother is None:
        if cfg_smooth is None:
            raise ValueError("attacking the smoothed policy needs a SmoothingConfig")
        smoother = make_smoother(q, cfg_smooth, exact=exact)
    # same noise stream as certify_episode, so eps = 0 replays the benign run
    return lambda batch, t: smoother.means(batch, stream=(STREAM_EPISODE, t))


def _sphere(rng, count, dim, radius):
    d = rng.normal(size=(count, dim))
    return radius * d / np.linalg.norm(d, axis=1, keepdims=True)


def _margin(scores, action):
    others = np.delete(scores, action, axis=-1)
    return scores[..., action] - others.max(axis=-1)


def _rollout(env, H, choose, gamma=1.0):
    H = env.spec.horizon if H is None else int(H)
    total = 0.0
    deltas, actions = [], []
    obs = env.observation()
    for t in range(H):
        delta, action = choose(obs, t)
        deltas.append(delta)
        actions.append(action)
        res = env.step(action)
        total += gamma ** t * res.reward
        obs = res.observation
        if res.done:
            break
    dim = env.spec.obs_dim
    return AttackResult(total, np.array(deltas).reshape(-1, dim), np.array(actions, dtype=int))


def random_attack_episode(env, q, cfg_attack: AttackConfig, cfg_smooth: SmoothingConfig | None = None,
                          H: int | None = None, exact: bool = False, smoother=None,
                          gamma: float = 1.0) -> AttackResult:
    """Per step, try the zero vector plus ``trials - 1`` points on the eps-sphere.

    The candidate giving the smallest margin of the clean action is applied.
    """
    score = _scorer(q, cfg_attack, cfg_smooth, exact, smoother)
    rng = np.random.default_rng(cfg_attack.seed)
    eps = cfg_attack.epsilon

    def choose(obs, t):
        cands = np.zeros((cfg_attack.trials, obs.size))
        if eps > 0 and cfg_attack.trials > 1:
            cands[1:] = _sphere(rng, cfg_attack.trials - 1, obs.size, eps)
        scores = score(obs + cands, t)
        clean = int(np.argmax(scores[0]))
        worst = int(np.argmin(_margin(scores, clean)))  # first minimum keeps the zero vector on ties
        return cands[worst], int(np.argmax(scores[worst]))

    return _rollout(env, H, choose, gamma)


def _project(delta, eps):
    norm = np.linalg.norm(delta)
    if norm > eps:
        delta = delta * (eps / norm) if eps > 0 else np.zeros_like(delta)
    return delta


def pgd_attack_episode(env, q, cfg_attack: AttackConfig, cfg_smooth: SmoothingConfig | None = None,
                       H: int | None = None, gamma: float = 1.0) -> AttackResult:
    """Per step, ``steps`` rounds of normalized gradient ascent on the margin loss.

    The loss is Q(runner-up) - Q(clean action); after each round the
    perturbation is projected back onto the eps-ball.  For the smoothed target
    the gradient is averaged over ``grad_samples`` Gaussian draws.
    """
    if not isinstance(q, MlpQ):
        raise UnsupportedError("PGD needs a differentiable MlpQ; use random_attack_episode for GridQ")
    score = _scorer(q, cfg_attack, cfg_smooth, False, None)
    eps = cfg_attack.epsilon
    step = cfg_attack.step_size if cfg_attack.step_size is not None else 2.5 * eps / cfg_attack.steps
    n_dim = q.obs_dim

    def gradient(x, direction, t):
        if cfg_attack.target == "raw":
            return q.grad(x, direction)
        k = min(cfg_attack.grad_samples, cfg_smooth.m)
        z = cfg_smooth.sigma * gaussian_noise(cfg_smooth.seed, (STREAM_ATTACK, t), k, n_dim)
        return q.grad(x + z, direction).mean(axis=0)

    def choose(obs, t):
        clean = int(np.argmax(score(obs, t)[0]))
        delta = np.zeros(n_dim)
        if eps > 0:
            for _ in range(cfg_attack.steps):
                s = score(obs + delta, t)[0]
                rival = int(np.argmax(np.where(np.arange(s.size) == clean, -np.inf, s)))
                direction = np.zeros(s.size)
                direction[rival], direction[clean] = 1.0, -1.0
                g = gradient(obs + delta, direction, t)
                norm = np.linalg.norm(g)
                if norm == 0:
                    break
                delta = _project(delta + step * g / norm, eps)
        return delta, int(np.argmax(score(obs + delta, t)[0]))

    return _rollout(env, H, choose, gamma)


def nonadaptive_perturbations(env, q, cfg_attack: AttackConfig, H: int | None = None,
                              method: str = "random") -> np.ndarray:
    """Fixed perturbation sequence for attacking sigma-randomized rollouts.

    The sequence is computed once on a clean rollout of the base greedy policy
    and is then replayed regardless of the noise each randomized rollout
    draws.  Rows past the attacked episode's end are zero.
    """
    H = env.spec.horizon if H is None else int(H)
    cfg_raw = AttackConfig(cfg_attack.epsilon, cfg_attack.steps, cfg_attack.trials, "raw",
                           cfg_attack.seed, cfg_attack.step_size, cfg_attack.grad_samples)
    start = env.snapshot()
    if method == "pgd":
        res = pgd_attack_episode(env, q, cfg_raw, None, H)
    elif method == "random":
        res = random_attack_episode(env, q, cfg_raw, None, H)
    else:
        raise ValueError(f"method must be 'random' or 'pgd', got {method!r}")
    env.restore(start)
    out = np.zeros((H, env.spec.obs_dim))
    out[:len(res.perturbations)] = res.perturbations
    return out
