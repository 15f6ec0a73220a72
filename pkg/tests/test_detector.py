import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from beta_attack import autodiff as ad
from beta_attack import detector as det
from beta_attack.autodiff import Tape, Tensor
from beta_attack.data import TimeSeriesDataset, min_max_normalize, split_bounds, synthesize_network
from beta_attack.data import sliding_windows, stack_segments
from beta_attack.detector import GdnConfig, ScoreCalibration
from beta_attack.errors import CalibrationError, ConfigError, DimensionError

from conftest import central_diff, rel_err


def _model(N=5, w=6, d=3, M=2, seed=0, **kw):
    cfg = GdnConfig(n_nodes=N, window=w, dim=d, max_neighbors=M, head_widths=(4,), **kw)
    model = det.init_model(cfg, seed)
    model.adjacency = det.learn_adjacency(model.params["embedding"], M).adjacency
    return model


def _attention_oracle(model, X, A):
    """Direct evaluation of the attention coefficients for one segment."""
    p = model.params
    V, W, om = p["embedding"], p["W"], p["omega"]
    d = V.shape[1]
    N = len(X)
    g = [np.r_[V[i], W @ X[i]] for i in range(N)]
    beta = np.zeros((N, N))
    for i in range(N):
        nb = [j for j in range(N) if A[j, i]]
        if not nb:
            continue
        pi = {}
        for j in nb:
            z = om @ np.r_[g[i], g[j]]
            pi[j] = z if z > 0 else 0.2 * z
        tot = sum(np.exp(v) for v in pi.values())
        for j in nb:
            beta[i, j] = np.exp(pi[j]) / tot
    return beta


def test_config_validation():
    with pytest.raises(ConfigError):
        GdnConfig(n_nodes=4, max_neighbors=4)
    with pytest.raises(ConfigError):
        GdnConfig(n_nodes=4, window=3, max_neighbors=2, conv_kernels=(5,))


def test_single_node_prediction_is_head_of_zero():
    cfg = GdnConfig(n_nodes=1, window=4, dim=3, max_neighbors=1, head_widths=(5,))
    model = det.init_model(cfg, 1)
    A = np.zeros((1, 1), dtype=int)
    fw, _, _ = det.forward(model, np.random.default_rng(0).random((1, 4)), A)
    assert np.array_equal(fw.aggregate.values, np.zeros((1, 1, 3)))
    p = model.params
    h0 = np.maximum(np.zeros(3) @ p["head.0.weight"] + p["head.0.bias"], 0)
    assert fw.prediction.values[0, 0] == pytest.approx(h0 @ p["head.1.weight"][:, 0] + p["head.1.bias"][0])


def test_two_node_singleton_softmax():
    model = _model(N=2, M=1)
    A = np.array([[0, 1], [1, 0]])
    fw, _, _ = det.forward(model, np.ones((2, 6)), A)
    assert np.allclose(fw.attention.values[0], [[0.0, 1.0], [1.0, 0.0]])


def test_attention_matches_direct_formula():
    model = _model()
    X = np.random.default_rng(2).random((5, 6))
    fw, _, _ = det.forward(model, X, model.adjacency)
    beta = fw.attention.values[0]
    assert np.allclose(beta, _attention_oracle(model, X, model.adjacency), atol=1e-10)
    assert np.allclose(beta.sum(axis=1), 1.0, atol=1e-9)


def test_shape_mismatch_raises():
    model = _model()
    with pytest.raises(DimensionError):
        det.forward(model, np.zeros((4, 6)), np.zeros((4, 4)))
    with pytest.raises(DimensionError):
        det.forward(model, np.zeros((5, 7)), model.adjacency)


def test_input_and_parameter_gradients_match_finite_differences():
    model = _model(seed=3)
    X = np.random.default_rng(3).random((5, 6))
    A = model.adjacency

    def loss_value(params, x):
        P = {k: Tensor(v) for k, v in params.items()}
        return float(np.sum(det.gdn_forward(P, x, A, model.config).prediction.values ** 2))

    tape = Tape()
    P = {k: tape.watch(v) for k, v in model.params.items()}
    Xt = tape.watch(X)
    loss = ad.sum_(ad.square(det.gdn_forward(P, Xt, A, model.config).prediction))
    names = list(P)
    grads = tape.gradients(loss, [Xt] + [P[k] for k in names])
    assert rel_err(grads[0], central_diff(lambda x: loss_value(model.params, x), X)) < 1e-4
    for k, g in zip(names, grads[1:]):
        num = central_diff(lambda v: loss_value({**model.params, k: v}, X), model.params[k])
        assert rel_err(g, num) < 1e-4, k


def test_multi_scale_conv_examples():
    X = np.random.default_rng(0).random((2, 3, 8))
    assert np.allclose(det.multi_scale_conv(X, [np.array([1.0])]).values, X)
    k = np.array([0.2, 0.5, -0.1])
    assert np.allclose(det.multi_scale_conv(X, [k, k]).values, ad.conv1d_same(X, k).values)
    ramp = np.arange(6.0)[None]
    k1, k3 = np.array([2.0]), np.array([1.0, -1.0, 0.5])
    direct3 = [sum(k3[l] * (ramp[0, t + l] if t + l < 6 else 0.0) for l in range(3)) for t in range(6)]
    out = det.multi_scale_conv(ramp, [k1, k3], "max").values[0]
    assert np.allclose(out, np.maximum(2 * ramp[0], direct3))
    with pytest.raises(ConfigError):
        det.multi_scale_conv(ramp, [])


def test_multi_scale_forward_gradients():
    model = _model(conv_kernels=(1, 3), conv_pool="avg", seed=5)
    X = np.random.default_rng(5).random((5, 6))
    A = model.adjacency
    f = lambda x: float(np.sum(det.forward(model, x, A)[0].prediction.values))
    tape = Tape()
    fw, P, Xt = det.forward(model, X, A, tape=tape, watch_input=True)
    g = tape.gradients(ad.sum_(fw.prediction), [Xt])[0]
    assert rel_err(g, central_diff(f, X)) < 1e-4


def _constant_dataset(N=3, T=400, w=5):
    raw = np.tile(np.linspace(1.0, 2.0, N), (T, 1))
    raw[0] = 0.0   # gives every sensor a nonzero training range
    ds = TimeSeriesDataset(tuple(map(str, range(N))), raw, np.zeros((T, N), bool), split_bounds(T), window=w,
                           stride=1)
    return min_max_normalize(ds)


def test_train_constant_signal_is_learned():
    ds = _constant_dataset()
    cfg = GdnConfig(n_nodes=3, window=5, dim=4, max_neighbors=1, head_widths=(8,), epochs=40, lr=1e-2)
    model = det.train(det.init_model(cfg, 0), ds)
    X, Y, _ = stack_segments(sliding_windows(ds, "train")[5:])
    assert np.mean((det.predict(model, X) - Y) ** 2) < 1e-4
    assert len(model.history) == 40


def test_train_is_deterministic():
    ds = _constant_dataset()
    cfg = GdnConfig(n_nodes=3, window=5, dim=4, max_neighbors=1, head_widths=(8,), epochs=3)
    a = det.train(det.init_model(cfg, 7), ds)
    b = det.train(det.init_model(cfg, 7), ds)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert np.array_equal(a.adjacency, b.adjacency)


def test_train_beats_persistence_on_synthetic():
    from beta_attack import pipeline
    from beta_attack.config import ExperimentConfig

    cfg = ExperimentConfig()
    ds = pipeline.build_dataset(cfg, 0)
    model = det.train(det.init_model(pipeline.victim_config(cfg, ds.n_sensors), 0), ds)
    X, Y, _ = stack_segments(sliding_windows(ds, "val"))
    mse = np.mean((det.predict(model, X) - Y) ** 2)
    naive = np.mean((X[:, :, -1] - Y) ** 2)
    assert mse < naive


def test_calibration_examples():
    cal = det.calibrate_errors(np.full((10, 3), 0.5))
    assert np.all(cal.iqr == det.IQR_FLOOR) and cal.threshold == 0.0
    errs = np.random.default_rng(0).random((50, 4))
    cal = det.calibrate_errors(errs)
    s = det.normalize_errors(errs, cal)
    assert not det.detect_global(s, cal.threshold).any()
    assert s.max() == cal.threshold
    with pytest.raises(CalibrationError):
        det.calibrate_errors(np.zeros((0, 3)))
    with pytest.raises(CalibrationError):
        ScoreCalibration(np.zeros(2), np.array([1.0, 0.0]), 1.0)


def test_score_matches_formula():
    model = _model(seed=4)
    rng = np.random.default_rng(4)
    X, obs = rng.random((7, 5, 6)), rng.random((7, 5))
    cal = ScoreCalibration(rng.random(5), rng.random(5) + 0.1, 1.0)
    expect = (np.abs(obs - det.predict(model, X)) - cal.median) / cal.iqr
    assert np.allclose(det.score(model, cal, X, obs), expect, atol=1e-12)
    pred = det.predict(model, X[0])
    cal0 = ScoreCalibration(np.abs(obs[0] - pred), np.ones(5), 1.0)
    assert np.allclose(det.score(model, cal0, X[0], obs[0]), 0.0)


def test_detection_examples():
    s = np.array([0.1, 0.5, 0.2])
    assert not det.detect_global(s, 1.0) and not det.detect_node(s, 1.0).any()
    s = np.array([0.1, 1.5, 0.2])
    assert det.detect_node(s, 1.0, 1) and det.detect_global(s, 1.0)
    assert not det.detect_node(np.array([1.0]), 1.0, 0)


def test_checkpoint_roundtrip(tmp_path):
    model = _model(seed=2)
    model.calibration = det.calibrate_errors(np.random.default_rng(0).random((20, 5)))
    det.save_checkpoint(model, tmp_path / "m", {"stage": "x"})
    back, header = det.load_checkpoint(tmp_path / "m")
    assert header["stage"] == "x" and back.config == model.config
    assert all(np.array_equal(back.params[k], model.params[k]) for k in model.params)
    assert np.array_equal(back.adjacency, model.adjacency)
    assert back.calibration.threshold == model.calibration.threshold


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_attention_rows_are_distributions(seed):
    model = _model(seed=seed)
    X = np.random.default_rng(seed).random((3, 5, 6))
    beta = det.forward(model, X, model.adjacency)[0].attention.values
    assert (beta >= 0).all() and np.allclose(beta.sum(axis=-1), 1.0, atol=1e-9)
    assert np.all(beta[:, model.adjacency.T == 0] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_forward_is_permutation_equivariant(seed):
    model = _model(seed=seed)
    rng = np.random.default_rng(seed)
    X = rng.random((5, 6))
    perm = rng.permutation(5)
    pm = model.copy()
    pm.params["embedding"] = model.params["embedding"][perm]
    A = model.adjacency[np.ix_(perm, perm)]
    out = det.predict(model, X)
    out_p = det.predict(pm, X[perm], A)
    assert np.allclose(out[perm], out_p, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5))
def test_score_monotone_in_error(e1, e2):
    cal = ScoreCalibration(np.array([0.3]), np.array([0.7]), 1.0)
    a, b = det.normalize_errors(np.array([e1]), cal), det.normalize_errors(np.array([e2]), cal)
    if e2 - e1 > 1e-9:
        assert a[0] < b[0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=1, max_size=8), st.floats(-3, 3))
def test_global_is_or_of_nodes(scores, lam):
    s = np.array(scores)
    assert det.detect_global(s, lam) == any(det.detect_node(s, lam, i) for i in range(len(s)))
