"""Absolute reward lower bounds by adaptive search over the trajectory tree.

Each tree node is an environment state.  Its extended radii say which
actions the smoothed policy may take under a per-step perturbation of size
``eps``: the top ``i+1`` actions when ``r^i <= eps < r^{i+1}``.  The search
starts from the benign trajectory at ``eps = 0`` and grows ``eps`` one
critical radius at a time (smallest first, FIFO among equal values),
expanding each newly admitted branch depth-first and tracking the smallest
return over all leaves.

At ``eps = 0`` exactly no perturbation exists, so only the smoothed greedy
action is taken.  An alternative whose radius is 0 is admitted at the
smallest positive ``eps``.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cert_action import extended_radii
from .env import EnvSnapshot
from .smoothing import ResourceError, SmoothingConfig, make_smoother, stream_id

STREAM_STATE = 3
# critical value used for alternatives with a zero radius
EPS_TINY = float(np.nextafter(0.0, 1.0))


@dataclass(eq=False)
class SearchNode:
    snapshot: EnvSnapshot
    depth: int
    prefix_return: float
    done: bool = False
    parent: "SearchNode | None" = field(default=None, repr=False)
    action: int | None = None


@dataclass(order=True)
class CriticalEntry:
    epsilon: float
    seq: int
    node: SearchNode = field(compare=False)
    action: int = field(compare=False)


@dataclass(frozen=True)
class SearchStats:
    nodes_expanded: int
    memo_hits: int
    states_explored: int
    attacked_states: int
    confidence: float
    pruned: int
    eps_covered: float  # bounds hold for every eps strictly below this
    complete: bool


@dataclass(frozen=True)
class RewardCertificate:
    entries: tuple[tuple[float, float], ...]
    stats: SearchStats
    alpha: float

    def bound_at(self, eps: float) -> float | None:
        """Certified lower bound for per-step perturbations of size ``eps``."""
        if eps < 0:
            raise ValueError("eps must be >= 0")
        if eps >= self.stats.eps_covered:
            return None
        bound = None
        for e, b in self.entries:
            if e > eps:
                break
            bound = b
        return bound

    def to_dict(self) -> dict:
        stats = asdict(self.stats)
        if math.isinf(stats["eps_covered"]):
            stats["eps_covered"] = None
        return {"entries": [{"epsilon": e, "lower_bound": b} for e, b in self.entries],
                "alpha": self.alpha, "stats": stats}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "lower_bound"])
        for e, b in self.entries:
            w.writerow([repr(e), repr(b)])
        return buf.getvalue()


class SearchBudgetExceeded(RuntimeError):
    """Raised when the node or time budget runs out; carries a sound partial certificate."""

    def __init__(self, message: str, certificate: RewardCertificate):
        super().__init__(message)
        self.certificate = certificate


def get_actions(radii: Sequence[float], eps: float, order: Sequence[int] | None = None):
    """Actions reachable under ``eps`` and the radii that would admit the rest.

    ``radii`` are the extended radii of a state and ``order`` its actions by
    descending smoothed value (identity when omitted).  Returns
    ``(possible, next_critical)`` with ``next_critical`` a list of
    ``(radius, action)`` pairs not yet admitted.
    """
    radii = np.asarray(radii, dtype=float)
    order = np.arange(len(radii)) if order is None else np.asarray(order)
    possible = [int(order[0])]
    critical = []
    for k in range(1, len(radii)):
        if eps > 0 and radii[k] <= eps:
            possible.append(int(order[k]))
        else:
            critical.append((float(radii[k]), int(order[k])))
    return possible, critical


def confidence(attacked_states: int, alpha: float) -> float:
    if attacked_states < 0:
        raise ValueError("attacked_states must be >= 0")
    return (1.0 - alpha) ** attacked_states


class _RadiusOracle:
    def __init__(self, smoother, cfg: SmoothingConfig, memo: bool):
        self.smoother = smoother
        self.cfg = cfg
        self.memo = {} if memo else None
        self.hits = 0
        self.seen: set[str] = set()

    def __call__(self, env, key: str):
        self.seen.add(key)
        if self.memo is not None and key in self.memo:
            self.hits += 1
            return self.memo[key]
        est = self.smoother.estimate(env.observation(), stream=(STREAM_STATE, stream_id(key)))
        out = (extended_radii(est, self.cfg), est.order)
        if self.memo is not None:
            self.memo[key] = out
        return out


def certify(env, q, cfg: SmoothingConfig, H: int | None = None, eps_max: float = math.inf,
            gamma: float = 1.0, enable_pruning: bool = False, exact: bool = False,
            smoother=None, memo: bool = True, max_nodes: int | None = None,
            max_seconds: float | None = None) -> RewardCertificate:
    """Certify reward lower bounds from the env's current state for eps in [0, eps_max]."""
    H = env.spec.horizon if H is None else int(H)
    if not eps_max > 0:
        raise ValueError("eps_max must be > 0")
    if enable_pruning and not env.spec.reward_nonnegative:
        raise ValueError("pruning is only sound for environments without negative rewards")
    smoother = smoother or make_smoother(q, cfg, exact=exact)
    radii_of = _RadiusOracle(smoother, cfg, memo)
    deadline = None if max_seconds is None else time.monotonic() + max_seconds
    start_snap = env.snapshot()

    heap: list[CriticalEntry] = []
    seq = 0
    lower = math.inf
    attacked: set[str] = set()
    entries: list[tuple[float, float]] = []
    counters = {"nodes": 0, "pruned": 0}

    def make_stats(eps_covered: float, complete: bool) -> SearchStats:
        return SearchStats(counters["nodes"], radii_of.hits, len(radii_of.seen), len(attacked),
                           confidence(len(attacked), cfg.alpha), counters["pruned"],
                           eps_covered, complete)

    def check_budget(eps: float):
        over_nodes = max_nodes is not None and counters["nodes"] > max_nodes
        over_time = deadline is not None and time.monotonic() > deadline
        if over_nodes or over_time:
            env.restore(start_snap)
            cert = RewardCertificate(tuple(entries), make_stats(eps, False), cfg.alpha)
            what = f"{max_nodes} nodes" if over_nodes else f"{max_seconds} s"
            raise SearchBudgetExceeded(f"search budget of {what} exhausted at eps={eps:.6g}", cert)

    def child(node: SearchNode, action: int) -> SearchNode:
        env.restore(node.snapshot)
        res = env.step(action)
        return SearchNode(env.snapshot(), node.depth + 1,
                          node.prefix_return + gamma ** node.depth * res.reward,
                          res.done, node, action)

    def expand(node: SearchNode, eps: float):
        nonlocal lower, seq
        stack = [node]
        while stack:
            n = stack.pop()
            counters["nodes"] += 1
            check_budget(eps)
            if n.depth >= H or n.done:
                lower = min(lower, n.prefix_return)
                continue
            if enable_pruning and n.prefix_return >= lower:
                counters["pruned"] += 1
                continue
            env.restore(n.snapshot)
            radii, order = radii_of(env, n.snapshot.key)
            possible, critical = get_actions(radii, eps, order)
            if len(possible) > 1:
                attacked.add(n.snapshot.key)
            for r, a in critical:
                heapq.heappush(heap, CriticalEntry(max(r, EPS_TINY), seq, n, a))
                seq += 1
            # reversed so the top-ranked action is explored first
            stack.extend(child(n, a) for a in reversed(possible))

    root = SearchNode(start_snap, 0, 0.0, env.done)
    expand(root, 0.0)
    entries.append((0.0, lower))
    while heap and heap[0].epsilon <= eps_max:
        eps = heap[0].epsilon
        while heap and heap[0].epsilon == eps:
            item = heapq.heappop(heap)
            if enable_pruning and item.node.prefix_return >= lower:
                counters["pruned"] += 1
                continue
            attacked.add(item.node.snapshot.key)
            expand(child(item.node, item.action), eps)
        if lower < entries[-1][1]:
            entries.append((eps, lower))
    env.restore(start_snap)
    covered = heap[0].epsilon if heap else math.inf
    return RewardCertificate(tuple(entries), make_stats(covered, not heap), cfg.alpha)


def brute_force_lower_bound(env, q, cfg: SmoothingConfig, H: int | None, eps: float,
                            gamma: float = 1.0, exact: bool = False, smoother=None,
                            max_leaves: int = 10**6) -> float:
    """Minimum return over every trajectory admissible under ``eps``.

    Plain recursion: no queue, no pruning, no caching.  Test oracle for tiny trees.
    """
    H = env.spec.horizon if H is None else int(H)
    if env.spec.num_actions ** H > max_leaves:
        raise ResourceError(f"{env.spec.num_actions}^{H} trajectories exceed the cap of {max_leaves}")
    smoother = smoother or make_smoother(q, cfg, exact=exact)
    start = env.snapshot()

    def rec(snap: EnvSnapshot, depth: int, prefix: float, done: bool) -> float:
        if depth >= H or done:
            return prefix
        env.restore(snap)
        est = smoother.estimate(env.observation(), stream=(STREAM_STATE, stream_id(snap.key)))
        possible, _ = get_actions(extended_radii(est, cfg), eps, est.order)
        best = math.inf
        for a in possible:
            env.restore(snap)
            res = env.step(a)
            best = min(best, rec(env.snapshot(), depth + 1, prefix + gamma ** depth * res.reward, res.done))
        return best

    try:
        return rec(start, 0, 0.0, env.done)
    finally:
        env.restore(start)
