import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beta_attack import detector as det
from beta_attack.autodiff import Tensor
from beta_attack.data import TimeSeriesDataset, min_max_normalize, sliding_windows, split_bounds, stack_segments
from beta_attack.detector import GdnConfig
from beta_attack.errors import ConfigError, EmptyNeighborhoodError
from beta_attack.explainer import (ExplainerConfig, ExplainerNet, augment_attributes, extract_candidates, fidelity,
                                   init_explainer, load_explainer, mask_matrix, rank_edges, sample_mask,
                                   save_explainer, train_explainer)
from beta_attack.surrogate import SurrogateModel

FAST = ExplainerConfig(epochs=10, max_segments=16)


def planted_instance(seed: int, T: int = 2000, w: int = 10):
    """Four sensors; u (2) copies a lagged signal from a (0) while b (1) is independent noise.

    The surrogate is trained with both a->u and b->u in its graph.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(T)
    a = np.sin(2 * np.pi * t / rng.uniform(30, 60) + rng.uniform(0, 6)) + 0.1 * rng.standard_normal(T)
    b = rng.standard_normal(T)
    c = np.sin(2 * np.pi * t / rng.uniform(70, 90)) + 0.1 * rng.standard_normal(T)
    u = np.r_[0.0, a[:-1]] + 0.02 * rng.standard_normal(T)
    ds = TimeSeriesDataset(("a", "b", "u", "c"), np.stack([a, b, u, c], 1), np.zeros((T, 4), bool),
                           split_bounds(T), window=w, stride=2)
    ds = min_max_normalize(ds)
    A = np.zeros((4, 4), dtype=int)
    A[0, 2] = A[1, 2] = A[3, 0] = A[3, 1] = A[2, 3] = A[0, 1] = A[1, 0] = 1
    cfg = GdnConfig(n_nodes=4, window=w, dim=4, max_neighbors=2, head_widths=(16,), epochs=40)
    model = det.train(det.init_model(cfg, seed), ds, fixed_adjacency=A)
    model.calibration = det.calibrate(model, ds)
    X, Y, _ = stack_segments(sliding_windows(ds, "val"))
    return SurrogateModel(model), X, Y


def test_sample_mask_examples():
    for tau in (0.05, 0.5, 3.0):
        assert sample_mask(np.array([0.0]), tau, noise=np.array([0.5])).values[0] == pytest.approx(0.5)
    u = np.linspace(0.01, 0.99, 50)
    assert (sample_mask(np.full(50, 20.0), 0.1, noise=u).values > 0.999).all()
    hi = sample_mask(np.array([5.0]), 0.01).values[0]
    lo = sample_mask(np.array([-5.0]), 0.01).values[0]
    assert hi > 1 - 1e-3 and lo < 1e-3
    with pytest.raises(ConfigError):
        sample_mask(np.zeros(2), 0.0)
    with pytest.raises(ConfigError):
        sample_mask(np.zeros(2), 0.5, noise=np.array([0.0, 0.5]))


def test_augmentation_examples():
    rng = np.random.default_rng(0)
    params = {"aug.self": rng.normal(size=4), "aug.nb": rng.normal(size=4)}
    X = rng.random((3, 4))
    A = np.zeros((3, 3), dtype=int)
    A[1, 0] = A[2, 0] = 1
    out = augment_attributes(X, A, params).values[0]
    assert np.array_equal(out[1], np.r_[X[1], np.zeros(4)])   # isolated: no in-neighbours
    X2 = X.copy()
    X2[2] = X2[1]
    out2 = augment_attributes(X2, A, params).values[0]
    assert np.allclose(out2[0, 4:], X2[1])


def test_augmentation_matches_softmax_oracle():
    rng = np.random.default_rng(1)
    params = {"aug.self": rng.normal(size=3), "aug.nb": rng.normal(size=3)}
    A = (rng.random((5, 5)) < 0.5).astype(int)
    np.fill_diagonal(A, 0)
    A[0, 1:] = 1
    X = rng.random((5, 3))
    out = augment_attributes(X, A, params).values[0]
    for i in range(5):
        nb = np.flatnonzero(A[:, i])
        if len(nb) == 0:
            assert np.array_equal(out[i, 3:], np.zeros(3))
            continue
        z = X[i] @ params["aug.self"] + X[nb] @ params["aug.nb"]
        z = np.where(z > 0, z, 0.2 * z)
        alpha = np.exp(z) / np.exp(z).sum()
        assert alpha.sum() == pytest.approx(1.0)
        assert np.allclose(out[i, 3:], alpha @ X[nb], atol=1e-12)


def test_full_mask_reproduces_surrogate_score(small_world):
    sur = small_world.bundle.surrogate
    n = sur.model.config.n_nodes
    edges = [tuple(e) for e in np.argwhere(sur.model.adjacency)]
    ones = mask_matrix(Tensor(np.ones((1, len(edges)))), edges, n).values
    A = sur.model.adjacency
    full_mask = np.where(A.T > 0, 1.0, 0.0)[None]
    assert np.array_equal(ones, full_mask)
    a = sur.target_score(small_world.X, small_world.Y, 0).values
    b = sur.target_score(small_world.X, small_world.Y, 0, edge_mask=ones).values
    assert np.array_equal(a, b)


def test_initial_fidelity_loss_is_zero_with_saturated_mask(small_world):
    sur = small_world.bundle.surrogate
    segs, obs = small_world.X[:4], small_world.Y[:4]
    cfg = ExplainerConfig(epochs=1, sparsity=0.0, entropy=0.0, init_logit=60.0, tau_start=0.1, tau_end=0.1)
    net = train_explainer(sur, segs, obs, 0, cfg)
    assert net.history[0] < 1e-12


def test_training_is_deterministic(small_world):
    sur = small_world.bundle.surrogate
    a = train_explainer(sur, small_world.X, small_world.Y, 3, FAST)
    b = train_explainer(sur, small_world.X, small_world.Y, 3, FAST)
    assert np.array_equal(a.edge_importance, b.edge_importance)
    assert a.history == b.history


def test_mask_values_and_inactive_edges(small_world):
    net = train_explainer(small_world.bundle.surrogate, small_world.X, small_world.Y, 3, FAST)
    act = net.active
    assert act.any() and not act.all()
    assert (net.edge_importance[~act] == 0).all()
    assert ((net.edge_importance[act] > 0) & (net.edge_importance[act] <= 1)).all()


def test_empty_neighbourhood_raises():
    cfg = GdnConfig(n_nodes=3, window=4, dim=2, max_neighbors=1, head_widths=(4,))
    model = det.init_model(cfg, 0)
    model.adjacency = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
    model.calibration = det.calibrate_errors(np.random.default_rng(0).random((10, 3)))
    with pytest.raises(EmptyNeighborhoodError):
        train_explainer(SurrogateModel(model), np.random.default_rng(0).random((4, 3, 4)), np.zeros((4, 3)), 2,
                        FAST)


def test_rank_edges_tie_rule():
    edges = [(2, 0), (0, 1), (1, 0), (0, 2)]
    assert rank_edges(edges, np.ones(4)) == [(0, 1), (0, 2), (1, 0), (2, 0)]
    assert rank_edges(edges, np.ones(4), np.array([0.0, 0.0, 5.0, 0.0]))[0] == (1, 0)
    assert rank_edges(edges, np.array([0.1, 0.9, 0.5, 0.5])) == [(0, 1), (0, 2), (1, 0), (2, 0)]


def test_extract_candidates_examples(small_world):
    net = train_explainer(small_world.bundle.surrogate, small_world.X, small_world.Y, 0, FAST)
    r1 = extract_candidates(net, 1)
    assert len(r1.top_edges) == 1 and len(r1.candidates) == 2
    r = extract_candidates(net, 3, small_world.bundle.surrogate, (small_world.X, small_world.Y))
    assert len(r.candidates) <= 6 and r.fidelity is not None and r.fidelity >= 0
    assert set(r.candidates) == {v for e in r.top_edges for v in e}
    with pytest.warns(RuntimeWarning):
        extract_candidates(net, 10_000)
    with pytest.raises(ConfigError):
        extract_candidates(net, 0)


def test_untrained_explainer_rejected(small_world):
    net = init_explainer(small_world.bundle.surrogate, 0, FAST)
    with pytest.raises(ConfigError):
        extract_candidates(net, 1)


def test_save_load_roundtrip(tmp_path, small_world):
    net = train_explainer(small_world.bundle.surrogate, small_world.X, small_world.Y, 0, FAST)
    save_explainer(net, tmp_path / "e", {"seed": 0})
    back = load_explainer(tmp_path / "e")
    assert back.edges == net.edges and back.target == net.target and back.config == net.config
    assert np.array_equal(back.edge_importance, net.edge_importance)
    assert extract_candidates(back, 2).top_edges == extract_candidates(net, 2).top_edges


@pytest.mark.slow
def test_planted_dependency_edge_ranks_first():
    wins, fid_ex, fid_rand = 0, [], []
    for seed in range(10):
        sur, X, Y = planted_instance(seed)
        net = train_explainer(sur, X, Y, 2, ExplainerConfig(seed=seed))
        imp = dict(zip(net.edges, net.edge_importance))
        logit = dict(zip(net.edges, net.mean_logit))
        assert imp[(0, 2)] >= imp[(1, 2)]
        wins += logit[(0, 2)] > logit[(1, 2)]
        top = extract_candidates(net, 1).top_edges
        fid_ex.append(fidelity(sur, 2, top, X, Y))
        rng = np.random.default_rng(seed)
        fid_rand.append(fidelity(sur, 2, [net.edges[int(rng.integers(len(net.edges)))]], X, Y))
    assert wins == 10
    assert np.mean(fid_ex) <= np.mean(fid_rand)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_candidate_count_bounds(E, seed):
    rng = np.random.default_rng(seed)
    edges = sorted({(int(a), int(b)) for a, b in rng.integers(0, 7, (12, 2)) if a != b})
    net = ExplainerNet(FAST, {}, edges, 0, 0.1, rng.random(len(edges)), [], {}, rng.normal(size=len(edges)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        r = extract_candidates(net, E)
    k = min(E, len(edges))
    assert len(r.top_edges) == k and len(r.candidates) <= 2 * k


@settings(max_examples=50, deadline=None)
@given(st.floats(-30, 30), st.floats(0.01, 5), st.floats(1e-4, 1 - 1e-4))
def test_sample_mask_in_unit_interval(logit, tau, u):
    m = sample_mask(np.array([logit]), tau, noise=np.array([u])).values[0]
    assert 0.0 <= m <= 1.0
