"""Deterministic reference environments with snapshot/restore.

Every environment here is deterministic once reset: the only randomness is
the seed-driven initial state.  The episode horizon is *not* enforced by the
environments themselves; rollouts and certifiers stop after ``H`` steps.
That keeps the dynamical state free of a time counter, so two paths that
reach the same configuration produce the same snapshot key.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class UsageError(RuntimeError):
    """Raised when an environment is driven outside its contract."""


class FormatError(ValueError):
    """Raised on malformed or foreign serialized payloads."""


@dataclass(frozen=True)
class EnvSpec:
    obs_dim: int
    num_actions: int
    horizon: int
    discount: float
    step_reward_bounds: tuple[float, float]
    episode_return_bounds: tuple[float, float]
    reward_nonnegative: bool
    obs_box: tuple[tuple[float, float], ...]

    def __post_init__(self):
        r_min, r_max = self.step_reward_bounds
        j_min, j_max = self.episode_return_bounds
        if self.obs_dim < 1 or self.num_actions < 1 or self.horizon < 1:
            raise ValueError("obs_dim, num_actions and horizon must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ValueError(f"discount must lie in [0, 1], got {self.discount}")
        if r_min > r_max or j_min > j_max:
            raise ValueError("reward/return bounds must satisfy low <= high")
        if self.discount == 1.0 and (j_max > self.horizon * r_max or j_min < self.horizon * r_min):
            raise ValueError("undiscounted return bounds exceed horizon * step bounds")
        if self.reward_nonnegative and r_min < 0:
            raise ValueError("reward_nonnegative requires r_min >= 0")
        if len(self.obs_box) != self.obs_dim:
            raise ValueError("obs_box needs one (low, high) pair per dimension")

    @property
    def return_range(self) -> float:
        return self.episode_return_bounds[1] - self.episode_return_bounds[0]


@dataclass(frozen=True)
class EnvSnapshot:
    payload: bytes
    key: str


@dataclass(frozen=True)
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool


@dataclass
class TabularModel:
    """Finite deterministic model of an environment, laid out on a cell grid.

    ``cell_of_state[s]`` is the multi-index of the observation cell occupied by
    state ``s``; cells that hold no state receive ``fill_value`` when a
    :class:`~rlcert.qfunc.GridQ` is built from the model.  The built-in
    environments surround the observation box with such empty cells, so
    observations pushed off the box carry no preference between actions.
    """

    next_state: np.ndarray  # (S, A) int
    reward: np.ndarray  # (S, A) float
    terminal: np.ndarray  # (S, A) bool, True when the transition ends the episode
    cell_edges: list[np.ndarray]
    cell_of_state: np.ndarray  # (S, N) int
    fill_value: float = 0.0

    @property
    def num_states(self) -> int:
        return self.next_state.shape[0]

    @property
    def num_actions(self) -> int:
        return self.next_state.shape[1]


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


class Env:
    """Base class: subclasses provide ``_get_state``/``_set_state``/``_step``."""

    name = "env"
    spec: EnvSpec

    def __init__(self):
        self._done = False
        self._ready = False

    # -- subclass hooks ---------------------------------------------------
    def _params(self) -> dict:
        raise NotImplementedError

    def _get_state(self) -> list:
        raise NotImplementedError

    def _set_state(self, state: list) -> None:
        raise NotImplementedError

    def _initial_state(self, seed: int) -> list:
        raise NotImplementedError

    def _step(self, action: int) -> tuple[float, bool]:
        raise NotImplementedError

    def observation(self) -> np.ndarray:
        raise NotImplementedError

    # -- public API -------------------------------------------------------
    def reset(self, seed: int = 0) -> np.ndarray:
        self._set_state(self._initial_state(int(seed)))
        self._done = False
        self._ready = True
        return self.observation()

    def step(self, action: int) -> StepResult:
        if not self._ready:
            raise UsageError("call reset() before step()")
        if self._done:
            raise UsageError("episode is finished; reset or restore before stepping")
        a = int(action)
        if a != action or not 0 <= a < self.spec.num_actions:
            raise UsageError(f"action {action!r} outside [0, {self.spec.num_actions})")
        reward, done = self._step(a)
        self._done = bool(done)
        return StepResult(self.observation(), float(reward), self._done)

    @property
    def done(self) -> bool:
        return self._done

    def _state_doc(self) -> dict:
        return {"env": self.name, "params": self._params(), "state": self._get_state(), "done": self._done}

    def state_key(self) -> str:
        return hashlib.sha256(_canonical(self._state_doc())).hexdigest()

    def snapshot(self) -> EnvSnapshot:
        if not self._ready:
            raise UsageError("call reset() before snapshot()")
        doc = self._state_doc()
        return EnvSnapshot(payload=_canonical(doc), key=hashlib.sha256(_canonical(doc)).hexdigest())

    def restore(self, snap: EnvSnapshot) -> None:
        try:
            doc = json.loads(snap.payload)
        except (ValueError, TypeError) as exc:
            raise FormatError(f"snapshot payload is not a valid document: {exc}") from None
        if not isinstance(doc, dict) or doc.get("env") != self.name:
            raise FormatError(f"snapshot was not produced by a {self.name} environment")
        if doc.get("params") != self._params():
            raise FormatError(f"snapshot parameters differ from this {self.name} instance")
        self._set_state(doc["state"])
        self._done = bool(doc["done"])
        self._ready = True

    def clone(self) -> "Env":
        return copy.deepcopy(self)

    def tabular_model(self) -> TabularModel:
        raise NotImplementedError(f"{self.name} has no finite tabular model")


class GridWorld(Env):
    """Square grid; the observation is the centre of the occupied cell.

    Observations are rescaled to the unit square: cell ``(r, c)`` is seen as
    ``((r + 0.5) / size, (c + 0.5) / size)``.

    Actions: 0 up (row-1), 1 down (row+1), 2 left (col-1), 3 right (col+1).
    Moving into a wall or the border leaves the agent in place with reward 0;
    entering the goal gives reward 1 and ends the episode.
    """

    name = "gridworld"
    MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1))

    def __init__(self, size: int = 5, walls: Sequence[tuple[int, int]] = (), start=(0, 0),
                 goal=None, random_start: bool = False, horizon: int | None = None):
        super().__init__()
        if size < 2:
            raise ValueError("size must be at least 2")
        self.size = int(size)
        self.walls = frozenset((int(r), int(c)) for r, c in walls)
        self.start = (int(start[0]), int(start[1]))
        self.goal = (self.size - 1, self.size - 1) if goal is None else (int(goal[0]), int(goal[1]))
        self.random_start = bool(random_start)
        for cell in (self.start, self.goal):
            if cell in self.walls or not self._inside(cell):
                raise ValueError(f"cell {cell} must be a free in-grid cell")
        H = 2 * self.size if horizon is None else int(horizon)
        self.spec = EnvSpec(
            obs_dim=2, num_actions=4, horizon=H, discount=1.0,
            step_reward_bounds=(0.0, 1.0), episode_return_bounds=(0.0, 1.0),
            reward_nonnegative=True, obs_box=((0.0, 1.0), (0.0, 1.0)),
        )
        self._pos = self.start

    def _inside(self, cell) -> bool:
        return 0 <= cell[0] < self.size and 0 <= cell[1] < self.size

    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.size) for c in range(self.size) if (r, c) not in self.walls]

    def _params(self):
        return {"size": self.size, "walls": [list(w) for w in sorted(self.walls)], "goal": list(self.goal)}

    def _get_state(self):
        return list(self._pos)

    def _set_state(self, state):
        self._pos = (int(state[0]), int(state[1]))

    def _initial_state(self, seed):
        if not self.random_start:
            return list(self.start)
        cells = [c for c in self.free_cells() if c != self.goal]
        return list(cells[np.random.default_rng(seed).integers(len(cells))])

    def _move(self, pos, action):
        dr, dc = self.MOVES[action]
        nxt = (pos[0] + dr, pos[1] + dc)
        if not self._inside(nxt) or nxt in self.walls:
            return pos
        return nxt

    def _step(self, action):
        self._pos = self._move(self._pos, action)
        if self._pos == self.goal:
            return 1.0, True
        return 0.0, False

    def observation(self):
        return (np.array(self._pos, dtype=float) + 0.5) / self.size

    @property
    def position(self) -> tuple[int, int]:
        return self._pos

    def place(self, cell) -> np.ndarray:
        """Put the agent on ``cell`` (a fresh, not-done episode)."""
        cell = (int(cell[0]), int(cell[1]))
        if cell in self.walls or not self._inside(cell):
            raise UsageError(f"cannot place agent on {cell}")
        self._pos = cell
        self._done = False
        self._ready = True
        return self.observation()

    def cell_edges(self) -> list[np.ndarray]:
        # box boundaries included: the outermost cells lie off the board
        edges = np.arange(0, self.size + 1, dtype=float) / self.size
        return [edges.copy(), edges.copy()]

    def tabular_model(self) -> TabularModel:
        cells = self.free_cells()
        index = {c: i for i, c in enumerate(cells)}
        S, A = len(cells), self.spec.num_actions
        nxt = np.zeros((S, A), dtype=int)
        rew = np.zeros((S, A))
        term = np.zeros((S, A), dtype=bool)
        for c, i in index.items():
            for a in range(A):
                if c == self.goal:
                    nxt[i, a], term[i, a] = i, True
                    continue
                d = self._move(c, a)
                nxt[i, a] = index[d]
                if d == self.goal:
                    rew[i, a], term[i, a] = 1.0, True
        return TabularModel(nxt, rew, term, self.cell_edges(), np.array(cells, dtype=int) + 1)


class ToyFreeway(Env):
    """Chicken-crossing game with cyclic deterministic traffic.

    The chicken starts on the pavement (row 0) and must cross ``lanes`` lanes.
    Each lane holds one car that moves ``speed`` columns per step around a
    ring of ``width`` columns; the chicken crosses at column 0.  A car on
    column 0 of the chicken's lane sends it back to the pavement (reward 0).
    Reaching the far side yields +1 and the chicken starts over.

    Actions: 0 stay, 1 up, 2 down.  Observation:
    ``[row / lanes, car_x_1 / (width - 1), ..., car_x_L / (width - 1)]``, i.e.
    every coordinate rescaled to [0, 1].
    """

    name = "toyfreeway"

    def __init__(self, lanes: int = 3, width: int = 6, speeds: Sequence[int] | None = None,
                 horizon: int = 12):
        super().__init__()
        if lanes < 1 or width < 2:
            raise ValueError("need lanes >= 1 and width >= 2")
        self.lanes = int(lanes)
        self.width = int(width)
        if speeds is None:
            speeds = [1 + (i % 2) for i in range(self.lanes)]
        if len(speeds) != self.lanes:
            raise ValueError("one speed per lane required")
        self.speeds = tuple(int(s) % self.width for s in speeds)
        H = int(horizon)
        self.spec = EnvSpec(
            obs_dim=1 + self.lanes, num_actions=3, horizon=H, discount=1.0,
            step_reward_bounds=(0.0, 1.0),
            episode_return_bounds=(0.0, float(H // (self.lanes + 1))),
            reward_nonnegative=True,
            obs_box=((0.0, 1.0),) * (1 + self.lanes),
        )
        self._row = 0
        self._cars = [0] * self.lanes

    def _params(self):
        return {"lanes": self.lanes, "width": self.width, "speeds": list(self.speeds)}

    def _get_state(self):
        return [self._row] + list(self._cars)

    def _set_state(self, state):
        self._row = int(state[0])
        self._cars = [int(x) for x in state[1:]]

    def _initial_state(self, seed):
        cars = np.random.default_rng(seed).integers(0, self.width, size=self.lanes)
        return [0] + [int(x) for x in cars]

    @staticmethod
    def _transition(row, cars, action, lanes, width, speeds):
        cars = [(x + s) % width for x, s in zip(cars, speeds)]
        if action == 1:
            row += 1
        elif action == 2:
            row = max(row - 1, 0)
        if row == lanes + 1:
            return 0, cars, 1.0
        if 1 <= row <= lanes and cars[row - 1] == 0:
            return 0, cars, 0.0
        return row, cars, 0.0

    def _step(self, action):
        self._row, self._cars, reward = self._transition(
            self._row, self._cars, action, self.lanes, self.width, self.speeds)
        return reward, False

    def observation(self):
        return np.array([self._row / self.lanes] + [x / (self.width - 1) for x in self._cars])

    def place(self, row: int, cars: Sequence[int]) -> np.ndarray:
        self._set_state([row] + list(cars))
        self._done = False
        self._ready = True
        return self.observation()

    def cell_edges(self) -> list[np.ndarray]:
        # one edge past each end of the box, so off-box cells stay empty
        row_edges = (np.arange(-1, self.lanes + 1, dtype=float) + 0.5) / self.lanes
        car_edges = (np.arange(-1, self.width, dtype=float) + 0.5) / (self.width - 1)
        return [row_edges] + [car_edges.copy() for _ in range(self.lanes)]

    def tabular_model(self) -> TabularModel:
        dims = [self.lanes + 1] + [self.width] * self.lanes
        states = np.array(np.unravel_index(np.arange(int(np.prod(dims))), dims)).T
        S, A = len(states), self.spec.num_actions
        nxt = np.zeros((S, A), dtype=int)
        rew = np.zeros((S, A))
        for i, st in enumerate(states):
            for a in range(A):
                row, cars, r = self._transition(int(st[0]), [int(x) for x in st[1:]], a,
                                                self.lanes, self.width, self.speeds)
                nxt[i, a] = np.ravel_multi_index([row] + cars, dims)
                rew[i, a] = r
        return TabularModel(nxt, rew, np.zeros((S, A), dtype=bool), self.cell_edges(), states + 1)


class PoleBalance(Env):
    """Deterministic cart-pole with explicit Euler integration.

    State ``[x, x_dot, theta, theta_dot]``; actions 0 push left, 1 push right.
    Each step that leaves the pole upright pays 1; the step that drops it
    (|theta| > 12 degrees or |x| > 2.4) pays 0 and ends the episode.
    """

    name = "polebalance"
    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5
    force_mag = 10.0
    tau = 0.02
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def __init__(self, horizon: int = 10, init_scale: float = 0.05):
        super().__init__()
        self.init_scale = float(init_scale)
        H = int(horizon)
        self.spec = EnvSpec(
            obs_dim=4, num_actions=2, horizon=H, discount=1.0,
            step_reward_bounds=(0.0, 1.0), episode_return_bounds=(0.0, float(H)),
            reward_nonnegative=True,
            obs_box=((-4.8, 4.8), (-math.inf, math.inf), (-math.pi, math.pi), (-math.inf, math.inf)),
        )
        self._state = np.zeros(4)

    def _params(self):
        return {"init_scale": self.init_scale}

    def _get_state(self):
        # repr() of a float round-trips exactly through json
        return [float(v) for v in self._state]

    def _set_state(self, state):
        self._state = np.array(state, dtype=float)

    def _initial_state(self, seed):
        rng = np.random.default_rng(seed)
        return list(rng.uniform(-self.init_scale, self.init_scale, size=4))

    def place(self, state: Sequence[float]) -> np.ndarray:
        self._set_state(list(state))
        self._done = False
        self._ready = True
        return self.observation()

    def _step(self, action):
        x, x_dot, theta, theta_dot = self._state
        force = self.force_mag if action == 1 else -self.force_mag
        total_mass = self.masscart + self.masspole
        polemass_length = self.masspole * self.length
        cos, sin = math.cos(theta), math.sin(theta)
        temp = (force + polemass_length * theta_dot**2 * sin) / total_mass
        theta_acc = (self.gravity * sin - cos * temp) / (
            self.length * (4.0 / 3.0 - self.masspole * cos**2 / total_mass))
        x_acc = temp - polemass_length * theta_acc * cos / total_mass
        x = x + self.tau * x_dot
        x_dot = x_dot + self.tau * x_acc
        theta = theta + self.tau * theta_dot
        theta_dot = theta_dot + self.tau * theta_acc
        self._state = np.array([x, x_dot, theta, theta_dot])
        fallen = abs(x) > self.x_limit or abs(theta) > self.theta_limit
        return (0.0, True) if fallen else (1.0, False)

    def observation(self):
        return self._state.copy()


ENVIRONMENTS = {cls.name: cls for cls in (GridWorld, ToyFreeway, PoleBalance)}


def make_env(name: str, **params) -> Env:
    try:
        cls = ENVIRONMENTS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVIRONMENTS)}") from None
    return cls(**params)
