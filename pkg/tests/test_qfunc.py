import numpy as np
import pytest

from rlcert.env import FormatError, GridWorld, TabularModel, ToyFreeway
from rlcert.qfunc import (ConvergenceError, GridQ, InputError, MlpQ, UnsupportedError, VersionError,
                          bellman_backup, dumps, evaluate, fit_mlp, grad, load, loads, save,
                          value_iteration, value_iteration_table)


def _dp_by_simulation(env: GridWorld, gamma, sweeps=200):
    """Q on free non-goal cells by repeated sweeps, stepping the env itself."""
    cells = [c for c in env.free_cells() if c != env.goal]
    V = {c: 0.0 for c in cells}
    for _ in range(sweeps):
        Q = {}
        for c in cells:
            for a in range(4):
                env.place(c)
                res = env.step(a)
                Q[c, a] = res.reward + (0.0 if res.done else gamma * V[env.position])
        V = {c: max(Q[c, a] for a in range(4)) for c in cells}
    return Q


@pytest.mark.parametrize("gamma", [1.0, 0.9])
def test_value_iteration_matches_simulated_dp(gamma):
    env = GridWorld(5, walls=[(1, 1), (2, 2), (3, 1)])
    q = value_iteration(env.tabular_model(), gamma)
    oracle = _dp_by_simulation(env, gamma)
    for (c, a), v in oracle.items():
        env.place(c)
        assert q(env.observation())[a] == pytest.approx(v, abs=1e-9)


def test_value_iteration_bfs_closed_form():
    # Q(s, a) = gamma ** d(s') with d the shortest path length from s' to the goal
    env = GridWorld(5)
    q = value_iteration(env.tabular_model(), 0.9)
    for r in range(5):
        for c in range(5):
            if (r, c) == env.goal:
                continue
            env.place((r, c))
            vals = q(env.observation())
            for a, (dr, dc) in enumerate(GridWorld.MOVES):
                nr, nc = min(max(r + dr, 0), 4), min(max(c + dc, 0), 4)
                d = (4 - nr) + (4 - nc)
                expected = 1.0 if d == 0 else 0.9 ** d
                assert vals[a] == pytest.approx(expected, abs=1e-9)


def test_absorbing_zero_and_chain():
    absorbing = TabularModel(np.array([[0]]), np.array([[0.0]]), np.array([[False]]),
                             [np.array([])], np.array([[0]]))
    assert np.all(value_iteration_table(absorbing, 0.9) == 0.0)
    # state 0: action 0 reaches the goal (reward 1, episode ends), action 1 stays
    chain = TabularModel(np.array([[1, 0], [1, 1]]), np.array([[1.0, 0.0], [0.0, 0.0]]),
                         np.array([[True, False], [True, True]]), [np.array([0.5])], np.array([[0], [1]]))
    Q = value_iteration_table(chain, 0.9)
    assert Q[0, 0] == 1.0 and Q[0, 1] == pytest.approx(0.9)


def test_bellman_residual_within_tol():
    model = ToyFreeway().tabular_model()
    Q = value_iteration_table(model, 0.9, tol=1e-8)
    assert np.max(np.abs(bellman_backup(model, Q, 0.9) - Q)) <= 1e-8


def test_convergence_error():
    loop = TabularModel(np.array([[0]]), np.array([[1.0]]), np.array([[False]]), [np.array([])], np.array([[0]]))
    with pytest.raises(ConvergenceError):
        value_iteration_table(loop, 1.0, max_iter=50)


def test_grid_eval_and_clip(rng):
    q = GridQ.constant([np.array([0.0, 1.0])], 3, 0.5)
    np.testing.assert_array_equal(q([7.0]), [0.5, 0.5, 0.5])
    table = np.array([[2.0, -1.0], [0.3, 0.4]])
    q = GridQ([np.array([0.0])], table)
    np.testing.assert_array_equal(evaluate(q, [-3.0], clip=(0, 1)), [1.0, 0.0])
    # idempotent on an already clipped table
    qc = GridQ(q.cell_edges, np.clip(table, 0, 1))
    x = rng.normal(size=(50, 1))
    np.testing.assert_array_equal(evaluate(qc, x, (0, 1)), evaluate(q, x, (0, 1)))
    with pytest.raises(InputError):
        evaluate(q, [np.nan])


def test_grid_edges_validated():
    with pytest.raises(ValueError):
        GridQ([np.array([1.0, 0.0])], np.zeros((3, 2)))
    with pytest.raises(ValueError):
        GridQ([np.array([0.0])], np.zeros((3, 2)))


def test_mlp_linear_cases():
    W = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    b = np.array([0.1, 0.2, 0.3])
    q = MlpQ([W], [b])
    np.testing.assert_allclose(q([1.0, 0.0]), b + W[:, 0])
    d = np.array([1.0, -1.0, 2.0])
    np.testing.assert_allclose(grad(q, [0.3, 0.7], d), W.T @ d)
    np.testing.assert_array_equal(grad(q, [0.3, 0.7], np.zeros(3)), 0.0)
    with pytest.raises(UnsupportedError):
        grad(GridQ.constant([np.array([0.0])], 2, 0.0), [0.0], [1.0, 0.0])


def test_mlp_grad_finite_differences():
    h = 1e-5
    worst = 0.0
    for k in range(100):
        rng = np.random.default_rng(k)
        q = MlpQ.random([4, 16, 3], seed=k)
        x = rng.normal(size=4)
        d = rng.normal(size=3)
        g = grad(q, x, d)
        fd = np.array([(d @ q(x + h * e) - d @ q(x - h * e)) / (2 * h) for e in np.eye(4)])
        # skip the rare probe whose difference stencil crosses a ReLU kink
        pre = q.weights[0] @ x + q.biases[0]
        if np.min(np.abs(pre)) < 1e-3:
            continue
        worst = max(worst, np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
    assert worst <= 1e-4


def test_mlp_grad_batch_matches_single():
    q = MlpQ.random([2, 8, 4], seed=3)
    x = np.random.default_rng(0).normal(size=(5, 2))
    d = np.array([1.0, 0.0, -1.0, 0.5])
    np.testing.assert_allclose(q.grad(x, d), np.array([q.grad(xi, d) for xi in x]))


def test_fit_mlp_reproduces_targets():
    env = GridWorld(4)
    model = env.tabular_model()
    Q = value_iteration_table(model, 0.9)
    X = np.array([[0.5 * (e[i - 1] + e[i]) for e, i in zip(model.cell_edges, c)] for c in model.cell_of_state])
    q = fit_mlp(X, Q, hidden=128, seed=0)
    assert np.max(np.abs(q(X) - Q)) < 0.05


def test_roundtrip_files(tmp_path, rng):
    qg = GridQ.random([np.sort(rng.normal(size=3)), np.sort(rng.normal(size=2))], 3, rng)
    qm = MlpQ.random([2, 8, 3], seed=1)
    probes = rng.normal(size=(1000, 2))
    for q in (qg, qm):
        path = tmp_path / "w.jsonl"
        save(q, path)
        back = load(path)
        np.testing.assert_array_equal(back(probes), q(probes))
    np.testing.assert_array_equal(load(tmp_path / "w.jsonl").weights[0], qm.weights[0])


def test_truncated_file_names_missing_section():
    text = dumps(GridQ.constant([np.array([0.0, 1.0])], 2, 0.25))
    truncated = text[: text.rindex('{"section": "table"') + 30]
    with pytest.raises(FormatError, match="missing section 'table'"):
        loads(truncated)


def test_version_mismatch():
    text = dumps(MlpQ.random([2, 3], seed=0)).replace('"format_version": 1', '"format_version": 2')
    with pytest.raises(VersionError, match="format_version"):
        loads(text)


def test_shape_mismatch_has_location():
    text = dumps(GridQ.constant([np.array([0.0])], 2, 0.0)).replace('"shape": [2, 2]', '"shape": [3, 2]')
    with pytest.raises(FormatError, match=r"<string>:3"):
        loads(text)
