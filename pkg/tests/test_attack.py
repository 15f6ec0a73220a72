import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beta_attack import detector as det
from beta_attack.attack import (STRATEGIES, AttackContext, AttackResult, AttackSpec, beta_attack, check_invariants,
                                export_segment_csv, init_perturbation, nettack_feature_perturb, nettack_scores,
                                nettack_select, normalized_two_hop, pgd_attack, pgd_step, project, random_attack,
                                run_strategy, select_nodes)
from beta_attack.detector import GdnConfig
from beta_attack.errors import ConfigError
from beta_attack.explainer import ExplainerConfig
from beta_attack.surrogate import SurrogateModel


def linear_loss(weights: np.ndarray):
    """Loss sum(W * X) per segment; its gradient is W everywhere."""
    def fn(Xb):
        return np.sum(Xb * weights, axis=(-2, -1)), np.broadcast_to(weights, Xb.shape).copy()
    return fn


def test_spec_defaults_and_validation():
    s = AttackSpec()
    assert (s.alpha, s.iterations, s.restarts, s.epsilon, s.budget) == (0.01, 10, 5, 0.1, 5)
    assert s.explainer_edges == 4 and s.edit_budget(100) == 125
    assert AttackSpec(budget=1).explainer_edges == 1
    assert AttackSpec(epsilon=0.0).epsilon == 0.0
    for bad in ({"epsilon": -0.1}, {"alpha": 0}, {"iterations": 0}, {"budget": 0}, {"selection": "x"}):
        with pytest.raises(ConfigError):
            AttackSpec(**bad)


def test_project_examples():
    X0 = np.array([[0.5, 0.95, 0.02], [0.3, 0.3, 0.3]])
    X = np.array([[0.9, 1.2, -0.5], [0.0, 0.0, 0.0]])
    P = project(X, X0, 0.1, [0])
    assert np.allclose(P[0], [0.6, 1.0, 0.0]) and np.array_equal(P[1], X0[1])
    # originals outside [0, 1] keep their eps-ball
    out = project(np.array([[1.5]]), np.array([[1.3]]), 0.1, [0])
    assert out[0, 0] == pytest.approx(1.3)


def test_init_perturbation_examples():
    rng = np.random.default_rng(0)
    X = rng.random((4, 5))
    assert np.array_equal(init_perturbation(X, 0.0, [1, 2], rng), X)
    assert np.array_equal(init_perturbation(X, 0.1, [], rng), X)
    draws = init_perturbation(np.full((1, 10_000), 0.5), 0.1, [0], rng)[0]
    assert draws.min() >= 0.4 and draws.max() <= 0.6
    sigma = 0.2 / np.sqrt(12) / np.sqrt(10_000)
    assert abs(draws.mean() - 0.5) < 3 * sigma


def test_pgd_step_examples():
    X0 = np.full((2, 3), 0.5)
    assert np.array_equal(pgd_step(X0, np.zeros_like(X0), 0.01, 0.1, X0, [0]), X0)
    big = pgd_step(X0, np.ones_like(X0), 10.0, 0.1, X0, [0])
    assert np.allclose(big[0], 0.6) and np.array_equal(big[1], X0[1])
    one = pgd_step(np.array([[0.5]]), np.array([[-3.0]]), 0.01, 0.1, np.array([[0.5]]), [0])
    assert one[0, 0] == pytest.approx(0.49, abs=1e-15)


def test_pgd_attack_picks_max_restart():
    rng = np.random.default_rng(1)
    X = rng.random((3, 4, 6))
    W = rng.normal(size=(4, 6))
    spec = AttackSpec(budget=2, restarts=4, iterations=3)
    Xb, traces, best = pgd_attack(linear_loss(W), X, [1, 2], spec, rng)
    assert traces.shape == (3, 4, 4)
    for s in range(3):
        assert traces[s, best[s], -1] == traces[s, :, -1].max()
        assert np.sum(Xb[s] * W) == pytest.approx(traces[s, best[s], -1])


def test_epsilon_zero_leaves_input_unchanged(small_world):
    u = small_world.targets[0]
    y = small_world.L[:, u]
    res = run_strategy("BETA", small_world.ctx, small_world.X[:3], small_world.Y[:3], u, y[:3],
                       AttackSpec(budget=2, epsilon=0.0, restarts=2, iterations=2))
    for r in res:
        assert np.array_equal(r.perturbed, r.original) and r.success is False


def test_unbudgeted_uses_every_other_node(small_world):
    u = small_world.targets[0]
    res = run_strategy("Unbudgeted", small_world.ctx, small_world.X[:2], small_world.Y[:2], u, 0,
                       AttackSpec(budget=2, restarts=1, iterations=2))
    assert all(r.influencers == [j for j in range(6) if j != u] for r in res)


def test_beta_composition_identity(small_world):
    u = small_world.targets[1]
    spec = AttackSpec(budget=2, restarts=2, iterations=3, seed=4)
    a = run_strategy("BETA", small_world.ctx, small_world.X[:4], small_world.Y[:4], u, 0, spec,
                     np.random.default_rng(9))
    b = beta_attack(small_world.ctx, small_world.X[:4], small_world.Y[:4], u, 0, spec, np.random.default_rng(9))
    assert all(np.array_equal(p.perturbed, q.perturbed) and p.influencers == q.influencers for p, q in zip(a, b))


def test_every_strategy_respects_its_constraints(small_world):
    u = small_world.targets[0]
    spec = AttackSpec(budget=2, restarts=2, iterations=3, nettack_edits=4)
    for tag in STRATEGIES:
        res = run_strategy(tag, small_world.ctx, small_world.X[:3], small_world.Y[:3], u, 0, spec,
                           np.random.default_rng(0))
        eps = None if tag == "Random" else spec.epsilon
        budget = None if tag == "Unbudgeted" else spec.budget
        for r in res:
            assert check_invariants(r, eps, budget) == [], tag


def test_random_attack_examples():
    rng = np.random.default_rng(0)
    X = rng.random((5, 8))
    lo, hi = np.full(5, -0.2), np.full(5, 0.3)
    Xp, nodes = random_attack(X, 4, 2, np.random.default_rng(3), lo, hi)
    assert nodes == [0, 1, 3, 4] and np.array_equal(Xp[2], X[2])
    Xq, nodes_q = random_attack(X, 4, 2, np.random.default_rng(3), lo, hi)
    assert np.array_equal(Xp, Xq) and nodes == nodes_q
    big = np.zeros((2000, 5, 5))
    Xr, nodes = random_attack(big, 4, 0, rng, np.arange(5) * 0.1, np.arange(5) * 0.1 + 0.5)
    assert nodes == [1, 2, 3, 4] and np.array_equal(Xr[:, 0], big[:, 0])
    for j in range(1, 5):
        assert Xr[:, j].min() >= j * 0.1 and Xr[:, j].max() <= j * 0.1 + 0.5
    with pytest.raises(ConfigError):
        random_attack(X, 5, 0, rng, lo, hi)


def _toy_weights(w):
    W = np.zeros(w + 1)
    W[:w] = 1.0
    return W


def test_nettack_scores_match_exhaustive_table():
    A = np.zeros((4, 4), dtype=int)
    A[1, 0] = A[2, 0] = A[3, 2] = 1
    X = np.random.default_rng(0).random((4, 3))
    W = np.r_[0.5, -1.0, 2.0, 0.1]
    A2 = normalized_two_hop(A)
    for y in (0, 1):
        got = nettack_scores(A, W, X, 0, y, 0.1, [1, 2, 3])
        for k, c in enumerate([1, 2, 3]):
            best = np.inf
            # exhaustive over sign patterns of the edited row
            for signs in np.array(np.meshgrid(*[[-1, 1]] * 3)).T.reshape(-1, 3):
                Xe = X.copy()
                Xe[c] += 0.1 * signs
                z = A2[0] @ Xe @ W[:3] + W[3]
                margin = z if y == 1 else -z
                best = min(best, margin)
            assert got[k] == pytest.approx(best)


def test_nettack_select_rules():
    A = np.zeros((5, 5), dtype=int)
    A[1, 0] = A[2, 0] = A[3, 2] = 1
    X = np.random.default_rng(0).random((5, 3))
    W = np.r_[1.0, -0.5, 0.3, 0.0]
    sc = nettack_scores(A, W, X, 0, 1, 0.1, [1, 2])
    assert nettack_select(A, W, X, 0, 1, 1, 0.1) == [[1, 2][int(np.argmin(sc))]]
    # symmetric one-hop neighbours: lowest index first; extra slots come from two hops
    S = np.zeros((5, 5), dtype=int)
    S[1, 0] = S[2, 0] = S[3, 1] = S[3, 2] = S[4, 3] = 1
    assert nettack_select(S, _toy_weights(3), np.full((5, 3), 0.5), 0, 1, 3, 0.1) == [1, 2, 3]
    with pytest.raises(ConfigError):
        nettack_select(A, W, X, 0, 1, 5, 0.1)
    iso = np.zeros((4, 4), dtype=int)
    iso[1, 2] = 1
    with pytest.warns(RuntimeWarning):
        assert 0 not in nettack_select(iso, W, np.zeros((4, 3)), 0, 1, 2, 0.1)


def test_nettack_feature_perturb_examples():
    rng = np.random.default_rng(2)
    X = rng.random((2, 4, 5)) * 0.8 + 0.1
    W = rng.normal(size=(4, 5))
    one = nettack_feature_perturb(linear_loss(W), X, [1, 3], 0.1, 1)
    diff = one != X
    assert (diff.sum(axis=(1, 2)) == 1).all()
    masked = np.where(np.isin(np.arange(4), [1, 3])[:, None], np.abs(W), -1)
    i, t = np.unravel_index(np.argmax(masked), W.shape)
    assert diff[:, i, t].all()
    assert np.allclose(one[:, i, t], X[:, i, t] + 0.1 * np.sign(W[i, t]))
    many = nettack_feature_perturb(linear_loss(W), X, [1, 3], 0.1, 7)
    changed = np.abs(many - X).max(axis=2) > 0
    assert not changed[:, [0, 2]].any()
    with pytest.raises(ConfigError):
        nettack_feature_perturb(linear_loss(W), X, [], 0.1, 1)


def test_chain_selects_the_coupled_node():
    """a -> u drives u; b only listens to u, so it is outside u's receptive field."""
    a, u, b = 0, 1, 2
    cfg = GdnConfig(n_nodes=3, window=4, dim=2, max_neighbors=1, head_widths=(4,))
    model = det.init_model(cfg, 0)
    A = np.zeros((3, 3), dtype=int)
    A[a, u] = A[u, b] = A[b, a] = 1
    model.adjacency = A
    model.calibration = det.calibrate_errors(np.random.default_rng(0).random((20, 3)))
    sur = SurrogateModel(model, {u: 1.0})
    segs = np.random.default_rng(1).random((8, 3, 4))
    ctx = AttackContext(sur, A, np.zeros(3), np.ones(3), (segs, np.zeros((8, 3))),
                        ExplainerConfig(epochs=5, max_segments=8))
    spec = AttackSpec(budget=1)
    assert select_nodes(ctx, spec, segs[0], u, 0, np.random.default_rng(0)) == [a]


def test_explainer_failure_falls_back_to_centrality():
    cfg = GdnConfig(n_nodes=4, window=4, dim=2, max_neighbors=1, head_widths=(4,))
    model = det.init_model(cfg, 0)
    A = np.zeros((4, 4), dtype=int)
    A[0, 1] = A[1, 2] = A[2, 0] = 1      # node 3 has no in-neighbours
    model.adjacency = A
    model.calibration = det.calibrate_errors(np.random.default_rng(0).random((20, 4)))
    segs = np.random.default_rng(1).random((4, 4, 4))
    ctx = AttackContext(SurrogateModel(model, {3: 1.0}), A, np.zeros(4), np.ones(4), (segs, np.zeros((4, 4))),
                        ExplainerConfig(epochs=2))
    with pytest.warns(RuntimeWarning):
        out = select_nodes(ctx, AttackSpec(budget=2), segs[0], 3, 0, np.random.default_rng(0))
    assert out == select_nodes(ctx, AttackSpec(budget=2, selection="centrality-only"), segs[0], 3, 0,
                               np.random.default_rng(0))


def test_attack_is_reproducible(small_world):
    u = small_world.targets[0]
    spec = AttackSpec(budget=2, restarts=2, iterations=2, seed=1)
    runs = [run_strategy("PGD+Heuristics", small_world.ctx, small_world.X[:3], small_world.Y[:3], u, 0, spec,
                         np.random.default_rng(5)) for _ in range(2)]
    assert all(np.array_equal(p.perturbed, q.perturbed) for p, q in zip(*runs))


def test_result_manifest_and_csv(tmp_path):
    X = np.zeros((2, 3))
    Xp = X.copy()
    Xp[1, 2] = 0.05
    r = AttackResult("BETA", 0, 1, [1], X, Xp)
    m = r.manifest(AttackSpec())
    assert m["perturbed_rows"] == [1] and m["linf"] == 0.05 and m["spec"]["budget"] == 5
    export_segment_csv(tmp_path / "s.csv", r, ["a", "b"])
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "lag,a_orig,b_orig,a_adv,b_adv" and lines[-1] == "-1,0.0,0.0,0.0,0.05"


def test_check_invariants_flags_violations():
    X = np.full((3, 2), 0.5)
    bad = X.copy()
    bad[0, 0] = 0.9
    bad[2, 1] = 1.2
    msgs = check_invariants(AttackResult("t", 0, 0, [2], X, bad), 0.1, 1)
    assert any("target" in m for m in msgs) and any("linf" in m for m in msgs) and any("[0, 1]" in m for m in msgs)


@settings(max_examples=200, deadline=None)
@given(st.integers(3, 8), st.integers(2, 10), st.integers(1, 6), st.floats(0.0, 0.5), st.floats(0.001, 0.3),
       st.integers(0, 2**31 - 1))
def test_pgd_invariants_fuzz(N, w, budget, eps, alpha, seed):
    rng = np.random.default_rng(seed)
    budget = min(budget, N - 1)
    u = int(rng.integers(N))
    rows = sorted(rng.choice([j for j in range(N) if j != u], size=budget, replace=False).tolist())
    X = rng.random((2, N, w))
    X[0, 0, 0], X[1, -1, -1] = 0.0, 1.0
    spec = AttackSpec(budget=budget, epsilon=eps, alpha=alpha, iterations=4, restarts=2)
    Xb, traces, best = pgd_attack(linear_loss(rng.normal(size=(N, w))), X, rows, spec, rng)
    for s in range(2):
        r = AttackResult("fuzz", u, 0, rows, X[s], Xb[s])
        assert check_invariants(r, eps, budget) == []
        assert (Xb[s] >= 0).all() and (Xb[s] <= 1).all()
        assert traces[s, best[s], -1] >= traces[s, :, -1].max()


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.floats(0.0, 0.4), st.integers(0, 2**31 - 1))
def test_projection_idempotent(N, w, eps, seed):
    rng = np.random.default_rng(seed)
    X0 = rng.random((N, w)) * 1.4 - 0.2
    rows = [j for j in range(N) if rng.random() < 0.5]
    P = project(rng.random((N, w)) * 3 - 1, X0, eps, rows)
    assert np.array_equal(project(P, X0, eps, rows), P)
