"""Q-function representations.

:class:`GridQ` is piecewise constant on an axis-aligned cell grid (outer cells
extend to infinity), which admits a closed-form Gaussian smoothing oracle.
:class:`MlpQ` is a small fully-connected ReLU network with hand-written
reverse-mode gradients, used by the PGD attack.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import FormatError, TabularModel

FORMAT_VERSION = 1


class InputError(ValueError):
    pass


class UnsupportedError(TypeError):
    pass


class ConvergenceError(RuntimeError):
    pass


class VersionError(FormatError):
    pass


def _as_batch(obs) -> tuple[np.ndarray, bool]:
    x = np.asarray(obs, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if np.isnan(x).any():
        raise InputError("observation contains NaN")
    return x, single


class GridQ:
    def __init__(self, cell_edges: Sequence[Sequence[float]], table):
        self.cell_edges = [np.asarray(e, dtype=float) for e in cell_edges]
        self.table = np.asarray(table, dtype=float)
        for d, e in enumerate(self.cell_edges):
            if e.ndim != 1 or (e.size > 1 and not np.all(np.diff(e) > 0)):
                raise ValueError(f"edges of dimension {d} must be strictly increasing")
            if not np.all(np.isfinite(e)):
                raise ValueError(f"edges of dimension {d} must be finite")
        shape = tuple(len(e) + 1 for e in self.cell_edges)
        if self.table.shape[:-1] != shape:
            raise ValueError(f"table shape {self.table.shape} does not match cells {shape} + (actions,)")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("table values must be finite")
        self.table.setflags(write=False)

    @property
    def obs_dim(self) -> int:
        return len(self.cell_edges)

    @property
    def num_actions(self) -> int:
        return self.table.shape[-1]

    @property
    def cell_shape(self) -> tuple[int, ...]:
        return self.table.shape[:-1]

    def cell_index(self, obs) -> tuple[np.ndarray, ...]:
        x, _ = _as_batch(obs)
        if x.shape[1] != self.obs_dim:
            raise InputError(f"expected observations of dimension {self.obs_dim}, got {x.shape[1]}")
        # cell i covers [edge[i-1], edge[i])
        return tuple(np.searchsorted(e, x[:, d], side="right") for d, e in enumerate(self.cell_edges))

    def __call__(self, obs) -> np.ndarray:
        idx = self.cell_index(obs)
        out = self.table[idx]
        return out[0] if np.asarray(obs).ndim == 1 else out

    @classmethod
    def constant(cls, cell_edges, num_actions: int, value: float) -> "GridQ":
        shape = tuple(len(e) + 1 for e in cell_edges) + (num_actions,)
        return cls(cell_edges, np.full(shape, float(value)))

    @classmethod
    def random(cls, cell_edges, num_actions: int, rng: np.random.Generator, low=0.0, high=1.0) -> "GridQ":
        shape = tuple(len(e) + 1 for e in cell_edges) + (num_actions,)
        return cls(cell_edges, rng.uniform(low, high, size=shape))


class MlpQ:
    """ReLU network; ``weights[i]`` has shape (out, in)."""

    def __init__(self, weights: Sequence, biases: Sequence):
        self.weights = [np.array(w, dtype=float) for w in weights]
        self.biases = [np.array(b, dtype=float) for b in biases]
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need matching, non-empty weight and bias lists")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} do not fit")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i} input {w.shape[1]} != layer {i - 1} output")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
        for arr in self.weights + self.biases:
            arr.setflags(write=False)

    @property
    def obs_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def num_actions(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def sizes(self) -> list[int]:
        return [self.obs_dim] + [w.shape[0] for w in self.weights]

    def _forward(self, x):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T + b
            h = z if i == last else np.maximum(z, 0.0)
            acts.append(h)
        return acts

    def __call__(self, obs) -> np.ndarray:
        x, single = _as_batch(obs)
        out = self._forward(x)[-1]
        return out[0] if single else out

    def grad(self, obs, direction) -> np.ndarray:
        """Gradient of ``direction . Q(obs)`` with respect to ``obs``."""
        x, single = _as_batch(obs)
        acts = self._forward(x)
        g = np.broadcast_to(np.asarray(direction, dtype=float), acts[-1].shape).copy()
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0)
            g = g @ self.weights[i]
        return g[0] if single else g

    @classmethod
    def random(cls, sizes: Sequence[int], seed: int = 0, scale: float = 1.0) -> "MlpQ":
        rng = np.random.default_rng(seed)
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            ws.append(rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_out, fan_in)))
            bs.append(rng.normal(0.0, 0.1 * scale, size=fan_out))
        return cls(ws, bs)


def fit_mlp(inputs, targets, hidden: int = 64, seed: int = 0, ridge: float = 1e-6) -> MlpQ:
    """Two-layer ReLU net: random hidden layer, least-squares readout.

    Gives a differentiable stand-in for a tabular Q without any gradient
    training loop.
    """
    X = np.asarray(inputs, dtype=float)
    Y = np.asarray(targets, dtype=float)
    rng = np.random.default_rng(seed)
    scale = X.std(axis=0) + 1e-12
    W1 = rng.normal(size=(hidden, X.shape[1])) / scale
    # each hidden unit's kink passes through a random training input
    anchors = X[rng.integers(len(X), size=hidden)]
    b1 = -np.einsum("ij,ij->i", W1, anchors) + rng.normal(0, 0.1, hidden)
    H = np.maximum(X @ W1.T + b1, 0.0)
    Hb = np.hstack([H, np.ones((len(H), 1))])
    coef = np.linalg.solve(Hb.T @ Hb + ridge * np.eye(hidden + 1), Hb.T @ Y)
    return MlpQ([W1, coef[:-1].T], [b1, coef[-1]])


def evaluate(q, obs, clip: tuple[float, float] | None = None) -> np.ndarray:
    """Q-values at ``obs`` (single or batch), optionally clipped to ``clip``."""
    x, _ = _as_batch(obs)
    values = q(np.asarray(obs, dtype=float))
    if clip is not None:
        lo, hi = clip
        if lo > hi:
            raise InputError(f"clip range ({lo}, {hi}) is empty")
        values = np.clip(values, lo, hi)
    return values


def grad(q, obs, direction) -> np.ndarray:
    if not isinstance(q, MlpQ):
        raise UnsupportedError(f"{type(q).__name__} is piecewise constant; gradients are zero almost everywhere")
    d = np.asarray(direction, dtype=float)
    if not np.all(np.isfinite(d)):
        raise InputError("direction must be finite")
    return q.grad(obs, d)


def greedy_action(values) -> int:
    # np.argmax returns the first maximum: lowest index wins ties
    return int(np.argmax(values))


# -- value iteration -------------------------------------------------------

def bellman_backup(model: TabularModel, Q: np.ndarray, gamma: float) -> np.ndarray:
    cont = np.where(model.terminal, 0.0, Q.max(axis=1)[model.next_state])
    return model.reward + gamma * cont


def value_iteration_table(model: TabularModel, gamma: float, tol: float = 1e-10,
                          max_iter: int = 100_000) -> np.ndarray:
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros((model.num_states, model.num_actions))
    for _ in range(max_iter):
        Q_new = bellman_backup(model, Q, gamma)
        delta = np.max(np.abs(Q_new - Q)) if Q.size else 0.0
        Q = Q_new
        # residual of Q_new is at most gamma * delta <= delta
        if delta <= tol:
            return Q
    raise ConvergenceError(
        f"value iteration did not reach tol={tol} within {max_iter} sweeps (last change {delta:.3g});"
        " gamma=1 needs every state to reach a terminal transition")


def grid_q_from_table(model: TabularModel, Q: np.ndarray) -> GridQ:
    shape = tuple(len(e) + 1 for e in model.cell_edges) + (model.num_actions,)
    table = np.full(shape, float(model.fill_value))
    table[tuple(model.cell_of_state.T)] = Q
    return GridQ(model.cell_edges, table)


def value_iteration(model: TabularModel, gamma: float, tol: float = 1e-10, max_iter: int = 100_000) -> GridQ:
    return grid_q_from_table(model, value_iteration_table(model, gamma, tol, max_iter))


# -- weights file ------------------------------------------------------------
#
# JSON-lines document: a header line followed by one line per section.
#   {"format_version": 1, "kind": "grid", "dims": {"obs_dim": N, "num_actions": A}}
#   {"section": "edges", "data": [[...], ...]}
#   {"section": "table", "shape": [...], "data": [...]}        (row-major)
# or for kind "mlp":
#   {"section": "layers", "sizes": [N, h1, ..., A]}
#   {"section": "weights", "data": [{"W": [[...]], "b": [...]}, ...]}
# Floats are written with 17 significant digits.

_SECTIONS = {"grid": ("edges", "table"), "mlp": ("layers", "weights")}


def _num(x: float) -> str:
    return format(float(x), ".17g")


def _nums(a) -> str:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return "[" + ",".join(_num(v) for v in a) + "]"
    return "[" + ",".join(_nums(row) for row in a) + "]"


def dumps(q) -> str:
    if isinstance(q, GridQ):
        header = {"format_version": FORMAT_VERSION, "kind": "grid",
                  "dims": {"obs_dim": q.obs_dim, "num_actions": q.num_actions}}
        lines = [
            json.dumps(header, sort_keys=True),
            '{"section": "edges", "data": [' + ",".join(_nums(e) for e in q.cell_edges) + "]}",
            '{"section": "table", "shape": ' + json.dumps(list(q.table.shape))
            + ', "data": ' + _nums(q.table.ravel()) + "}",
        ]
    elif isinstance(q, MlpQ):
        header = {"format_version": FORMAT_VERSION, "kind": "mlp",
                  "dims": {"obs_dim": q.obs_dim, "num_actions": q.num_actions}}
        layers = ",".join('{"W": ' + _nums(w) + ', "b": ' + _nums(b) + "}" for w, b in zip(q.weights, q.biases))
        lines = [
            json.dumps(header, sort_keys=True),
            '{"section": "layers", "sizes": ' + json.dumps(q.sizes) + "}",
            '{"section": "weights", "data": [' + layers + "]}",
        ]
    else:
        raise UnsupportedError(f"cannot serialize {type(q).__name__}")
    return "\n".join(lines) + "\n"


def save(q, path) -> None:
    Path(path).write_text(dumps(q))


def loads(text: str, source: str = "<string>"):
    lines = text.split("\n")
    docs = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            docs.append((lineno, json.loads(line)))
        except json.JSONDecodeError as exc:
            # a cut-off final line is a truncated section; anything else is corrupt
            if lineno == len(lines) or all(not rest.strip() for rest in lines[lineno:]):
                break
            raise FormatError(f"{source}:{lineno}: invalid JSON ({exc.msg})") from None
    if not docs:
        raise FormatError(f"{source}: missing section 'header'")
    lineno, header = docs[0]
    if not isinstance(header, dict) or "format_version" not in header:
        raise FormatError(f"{source}:{lineno}: header lacks 'format_version'")
    if header["format_version"] != FORMAT_VERSION:
        raise VersionError(
            f"{source}:{lineno}: format_version {header['format_version']!r} is not supported "
            f"(expected {FORMAT_VERSION})")
    kind = header.get("kind")
    if kind not in _SECTIONS:
        raise FormatError(f"{source}:{lineno}: unknown kind {kind!r}")
    dims = header.get("dims") or {}
    sections = {}
    for lineno, doc in docs[1:]:
        name = doc.get("section") if isinstance(doc, dict) else None
        if name not in _SECTIONS[kind]:
            raise FormatError(f"{source}:{lineno}: unexpected section {name!r} for kind {kind!r}")
        sections[name] = (lineno, doc)
    for name in _SECTIONS[kind]:
        if name not in sections:
            raise FormatError(f"{source}: missing section {name!r}")
    try:
        if kind == "grid":
            _, edges_doc = sections["edges"]
            lineno, table_doc = sections["table"]
            edges = [np.array(e, dtype=float) for e in edges_doc["data"]]
            shape = tuple(table_doc["shape"])
            data = np.array(table_doc["data"], dtype=float)
            if data.size != int(np.prod(shape)):
                raise FormatError(f"{source}:{lineno}: table has {data.size} values, shape needs {int(np.prod(shape))}")
            q = GridQ(edges, data.reshape(shape))
        else:
            _, layers_doc = sections["layers"]
            lineno, weights_doc = sections["weights"]
            ws = [np.array(layer["W"], dtype=float) for layer in weights_doc["data"]]
            bs = [np.array(layer["b"], dtype=float) for layer in weights_doc["data"]]
            q = MlpQ(ws, bs)
            if q.sizes != list(layers_doc["sizes"]):
                raise FormatError(f"{source}:{lineno}: layer sizes {q.sizes} disagree with declared {layers_doc['sizes']}")
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}:{lineno}: {exc}") from None
    if dims and (dims.get("obs_dim") != q.obs_dim or dims.get("num_actions") != q.num_actions):
        raise FormatError(f"{source}: dims {dims} disagree with stored arrays "
                          f"(obs_dim={q.obs_dim}, num_actions={q.num_actions})")
    return q


def load(path):
    return loads(Path(path).read_text(), source=str(path))
