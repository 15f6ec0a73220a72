"""Graph-attention forecasting anomaly detector (GDN-style victim model).

Shapes used throughout: a batch of segments ``X`` is ``(b, N, w)``, model
predictions are ``(b, N)``. The adjacency follows the graph module's
convention (``A[j, i] = 1`` when j feeds i).
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import read_arrays, write_arrays
from .autodiff import AdamState, Tape, Tensor, adam_step
from .data import TimeSeriesDataset, sliding_windows, stack_segments
from .errors import (CalibrationError, ConfigError, DimensionError, NonFiniteError, PolicyError,
                     TrainingDivergedError)
from .graph import SensorGraph, learn_adjacency

logger = logging.getLogger(__name__)

IQR_FLOOR = 1e-9


@dataclass(frozen=True)
class GdnConfig:
    n_nodes: int
    window: int = 100
    dim: int = 16
    max_neighbors: int = 5
    head_widths: tuple[int, ...] = (64,)
    leaky_slope: float = 0.2
    w_init_scale: float = 0.05             # multiplies the usual 1/sqrt(w) bound for W
    conv_kernels: tuple[int, ...] = ()      # empty: multi-scale front-end disabled
    conv_pool: str = "max"
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.n_nodes < 1 or self.window < 1 or self.dim < 1:
            raise ConfigError("n_nodes, window and dim must be positive")
        if self.n_nodes > 1 and not 1 <= self.max_neighbors < self.n_nodes:
            raise ConfigError(f"max_neighbors must be in [1, N-1], got {self.max_neighbors}")
        for k in self.conv_kernels:
            if not 1 <= k <= self.window:
                raise ConfigError(f"kernel size {k} must be in [1, {self.window}]")
        if self.w_init_scale <= 0:
            raise ConfigError("w_init_scale must be positive")
        if self.conv_pool not in ("max", "avg"):
            raise ConfigError("conv_pool must be 'max' or 'avg'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head_widths"] = list(self.head_widths)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GdnConfig":
        d = dict(d)
        d["head_widths"] = tuple(d.get("head_widths", (64,)))
        d["conv_kernels"] = tuple(d.get("conv_kernels", ()))
        return cls(**d)


@dataclass(frozen=True)
class ScoreCalibration:
    median: np.ndarray
    iqr: np.ndarray
    threshold: float

    def __post_init__(self):
        if (self.iqr <= 0).any():
            raise CalibrationError("IQR must be positive")


@dataclass
class GdnModel:
    """Parameters plus the graph and calibration they were fitted with."""

    config: GdnConfig
    params: dict[str, np.ndarray]
    seed: int = 0
    adjacency: np.ndarray | None = None
    calibration: ScoreCalibration | None = None
    history: list[float] = field(default_factory=list)

    @property
    def graph(self) -> SensorGraph:
        if self.adjacency is None:
            raise ConfigError("model has no adjacency yet")
        return SensorGraph(self.adjacency, self.params["embedding"], self.config.max_neighbors)

    def copy(self) -> "GdnModel":
        return GdnModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed,
                        None if self.adjacency is None else self.adjacency.copy(), self.calibration,
                        list(self.history))


def init_model(config: GdnConfig, seed: int = 0) -> GdnModel:
    rng = np.random.default_rng(seed)
    d, w, N = config.dim, config.window, config.n_nodes

    def unif(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    params = {
        "embedding": unif((N, d), d),
        "W": unif((d, w), w) * config.w_init_scale,
        "omega": rng.uniform(-1, 1, size=4 * d) * np.sqrt(6.0 / (4 * d + 1)),
    }
    for h, k in enumerate(config.conv_kernels):
        params[f"conv.{h}"] = unif((k,), k)
    widths = (d,) + tuple(config.head_widths) + (1,)
    for l in range(len(widths) - 1):
        params[f"head.{l}.weight"] = unif((widths[l], widths[l + 1]), widths[l])
        params[f"head.{l}.bias"] = unif((widths[l + 1],), widths[l])
    return GdnModel(config, params, seed)


# ----------------------------------------------------------------------------
# forward pass


@dataclass
class Forward:
    prediction: Tensor          # (b, N)
    features: Tensor            # (b, N, w) after the optional conv front-end
    wx: Tensor                  # (b, N, d)
    attention: Tensor           # (b, N_i, N_j), zero off the neighbourhood
    aggregate: Tensor           # r, (b, N, d)
    node_out: Tensor            # v ⊙ r, (b, N, d)


def multi_scale_conv(X, kernels: Sequence, pool: str = "max") -> Tensor:
    """Per-node 1-D convolutions at several scales, pooled elementwise.

    Every branch keeps the window length (zero padding past the window end),
    so the pooled output has the shape of ``X``.
    """
    if not kernels:
        raise ConfigError("need at least one kernel")
    branches = [ad.conv1d_same(X, k) for k in kernels]
    if len(branches) == 1:
        return branches[0]
    stacked = ad.stack(branches, axis=0)
    if pool == "max":
        return ad.max_(stacked, axis=0)
    if pool == "avg":
        return ad.mean(stacked, axis=0)
    raise ConfigError(f"unknown pool {pool!r}")


def gdn_forward(params: dict[str, Tensor], X, adjacency: np.ndarray, config: GdnConfig,
                edge_mask=None) -> Forward:
    """Differentiable forward pass on tensors.

    ``edge_mask`` (broadcastable to ``(b, N_i, N_j)``) scales the attention
    coefficient of every edge j -> i after the softmax.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim == 2:
        X = ad.reshape(X, (1,) + X.shape)
    b, N, w = X.shape
    A = np.asarray(adjacency)
    if A.shape != (N, N):
        raise DimensionError(f"adjacency {A.shape} does not match {N} nodes")
    if N != config.n_nodes or w != config.window:
        raise DimensionError(f"segment shape {(N, w)} does not match model {(config.n_nodes, config.window)}")
    d = config.dim

    feats = X
    if config.conv_kernels:
        feats = multi_scale_conv(X, [params[f"conv.{h}"] for h in range(len(config.conv_kernels))],
                                 config.conv_pool)
    wx = ad.matmul(feats, ad.transpose(params["W"]))                       # (b, N, d)
    V = params["embedding"]
    g = ad.concat([ad.broadcast_to(V, (b, N, d)), wx], axis=-1)            # (b, N, 2d)
    omega = params["omega"]
    w_self = ad.reshape(ad.take(omega, np.arange(2 * d), axis=0), (2 * d, 1))
    w_nb = ad.reshape(ad.take(omega, np.arange(2 * d, 4 * d), axis=0), (2 * d, 1))
    s_self = ad.matmul(g, w_self)                                          # (b, N, 1)
    s_nb = ad.transpose(ad.matmul(g, w_nb), (0, 2, 1))                     # (b, 1, N)
    rho = ad.leaky_relu(ad.add(s_self, s_nb), config.leaky_slope)         # (b, N_i, N_j)
    beta = ad.masked_softmax(rho, (A.T > 0)[None], axis=-1, empty="zero")
    if edge_mask is not None:
        beta = ad.mul(beta, edge_mask)
    r = ad.relu(ad.matmul(beta, wx))
    h = ad.mul(V, r)
    out = h
    n_layers = len(config.head_widths) + 1
    for l in range(n_layers):
        out = ad.add(ad.matmul(out, params[f"head.{l}.weight"]), params[f"head.{l}.bias"])
        if l < n_layers - 1:
            out = ad.relu(out)
    pred = ad.reshape(out, (b, N))
    return Forward(pred, feats, wx, beta, r, h)


def _constant_params(model: GdnModel) -> dict[str, Tensor]:
    return {k: Tensor(v) for k, v in model.params.items()}


def predict(model: GdnModel, X: np.ndarray, adjacency: np.ndarray | None = None,
            batch_size: int = 512) -> np.ndarray:
    """Forecasts for ``X`` of shape (N, w) or (b, N, w); returns (N,) or (b, N)."""
    A = model.adjacency if adjacency is None else adjacency
    if A is None:
        raise ConfigError("no adjacency available")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    Xb = X[None] if single else X
    P = _constant_params(model)
    outs = [gdn_forward(P, Xb[i:i + batch_size], A, model.config).prediction.values
            for i in range(0, len(Xb), batch_size)]
    out = np.concatenate(outs) if outs else np.zeros((0, model.config.n_nodes))
    return out[0] if single else out


def forward(model: GdnModel, X: np.ndarray, adjacency: np.ndarray | None = None, tape: Tape | None = None,
            watch_input: bool = False, edge_mask=None) -> tuple[Forward, dict[str, Tensor], Tensor]:
    """Forward pass with intermediates; records on ``tape`` when one is given.

    Returns ``(forward, params, X)`` where ``params`` and ``X`` are the
    tensors the pass was built from (watched leaves when a tape is used).
    """
    A = model.adjacency if adjacency is None else adjacency
    if tape is None:
        P = _constant_params(model)
        Xt = Tensor(X)
    else:
        P = {k: tape.watch(v) for k, v in model.params.items()}
        Xt = tape.watch(X) if watch_input else Tensor(X)
    return gdn_forward(P, Xt, A, model.config, edge_mask), P, Xt


# ----------------------------------------------------------------------------
# training


def _param_order(model: GdnModel) -> list[str]:
    return list(model.params)


def fit(model: GdnModel, X: np.ndarray, Y: np.ndarray, *, epochs: int | None = None, seed: int | None = None,
        fixed_adjacency: np.ndarray | None = None, lr: float | None = None,
        batch_size: int | None = None) -> GdnModel:
    """Minimize forecasting MSE on windows ``X`` (S, N, w) with targets ``Y`` (S, N).

    The graph is rebuilt from the current embeddings before every batch
    unless ``fixed_adjacency`` is given. Returns a new model; the loss of
    every epoch is appended to ``history``.
    """
    cfg = model.config
    epochs = cfg.epochs if epochs is None else epochs
    lr = cfg.lr if lr is None else lr
    batch_size = cfg.batch_size if batch_size is None else batch_size
    rng = np.random.default_rng(model.seed if seed is None else seed)
    names = _param_order(model)
    params = [model.params[k].copy() for k in names]
    state = AdamState.zeros_like(params)
    history = list(model.history)
    last_finite = history[-1] if history else None
    S = len(X)
    if S == 0:
        raise ConfigError("no training windows")

    def graph_of(emb):
        if fixed_adjacency is not None:
            return fixed_adjacency
        return learn_adjacency(emb, cfg.max_neighbors).adjacency if cfg.n_nodes > 1 else np.zeros((1, 1), int)

    for _ in range(epochs):
        order = rng.permutation(S)
        total = 0.0
        for start in range(0, S, batch_size):
            idx = order[start:start + batch_size]
            A = graph_of(params[names.index("embedding")])
            tape = Tape()
            try:
                P = {k: tape.watch(p) for k, p in zip(names, params)}
                out = gdn_forward(P, X[idx], A, cfg)
                loss = ad.mean(ad.square(ad.sub(out.prediction, Y[idx])))
                grads = tape.gradients(loss, [P[k] for k in names])
                params, state = adam_step(params, grads, state, lr=lr)
                if not all(np.isfinite(p).all() for p in params):
                    raise NonFiniteError("parameters became non-finite")
            except NonFiniteError:
                raise TrainingDivergedError(last_finite) from None
            total += loss.item() * len(idx)
            last_finite = loss.item()
        history.append(total / S)
        logger.debug("epoch %d loss %.6g", len(history), history[-1])
    new_params = dict(zip(names, params))
    A = graph_of(new_params["embedding"])
    return GdnModel(cfg, new_params, model.seed, np.asarray(A).copy(), None, history)


def train(model: GdnModel, dataset: TimeSeriesDataset, **kwargs) -> GdnModel:
    """Fit on the training split's sliding windows (which must be anomaly-free)."""
    if dataset.labels[dataset.split_slice("train")].any():
        raise PolicyError("training split contains anomalies")
    X, Y, _ = stack_segments(sliding_windows(dataset, "train"))
    return fit(model, X, Y, **kwargs)


# ----------------------------------------------------------------------------
# scoring


def calibrate_errors(errors: np.ndarray) -> ScoreCalibration:
    """Per-sensor median/IQR of absolute errors ``(S, N)``; threshold = max normalized score."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.ndim != 2 or len(errors) == 0:
        raise CalibrationError("need a non-empty (steps, sensors) error matrix")
    med = np.median(errors, axis=0)
    q1, q3 = np.percentile(errors, [25, 75], axis=0)
    iqr = np.maximum(q3 - q1, IQR_FLOOR)
    scores = (errors - med) / iqr
    return ScoreCalibration(med, iqr, float(scores.max()))


def calibrate(model: GdnModel, dataset: TimeSeriesDataset, split: str = "val") -> ScoreCalibration:
    try:
        segs = sliding_windows(dataset, split)
    except Exception as exc:
        raise CalibrationError(f"cannot calibrate on split {split!r}: {exc}") from exc
    if not segs:
        raise CalibrationError("empty validation split")
    X, Y, _ = stack_segments(segs)
    return calibrate_errors(np.abs(Y - predict(model, X)))


def normalize_errors(errors: np.ndarray, calibration: ScoreCalibration) -> np.ndarray:
    return (np.asarray(errors) - calibration.median) / calibration.iqr


def score(model: GdnModel, calibration: ScoreCalibration, X: np.ndarray, observed: np.ndarray,
          adjacency: np.ndarray | None = None) -> np.ndarray:
    """Normalized anomaly scores ``(|x - x_hat| - median) / IQR``; same leading shape as ``observed``."""
    return normalize_errors(np.abs(np.asarray(observed) - predict(model, X, adjacency)), calibration)


def detect_node(scores: np.ndarray, threshold: float, node: int | None = None):
    """Strict exceedance ``score > threshold`` for one node (or all nodes)."""
    s = np.asarray(scores)
    dec = s > threshold
    return dec if node is None else dec[..., node]


def detect_global(scores: np.ndarray, threshold: float):
    return np.asarray(scores).max(axis=-1) > threshold


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: GdnModel, path: str | Path, extra: dict | None = None) -> None:
    arrays = dict(model.params)
    if model.adjacency is not None:
        arrays["__adjacency__"] = model.adjacency
    if model.calibration is not None:
        arrays["__median__"] = model.calibration.median
        arrays["__iqr__"] = model.calibration.iqr
    header = {"kind": "gdn", "config": model.config.to_dict(), "seed": model.seed,
              "threshold": None if model.calibration is None else model.calibration.threshold,
              "history": model.history, **(extra or {})}
    write_arrays(path, arrays, header)


def load_checkpoint(path: str | Path) -> tuple[GdnModel, dict]:
    arrays, header = read_arrays(path)
    adjacency = arrays.pop("__adjacency__", None)
    calibration = None
    if "__median__" in arrays:
        calibration = ScoreCalibration(arrays.pop("__median__"), arrays.pop("__iqr__"), header["threshold"])
    model = GdnModel(GdnConfig.from_dict(header["config"]), arrays, header["seed"], adjacency, calibration,
                     list(header.get("history", [])))
    return model, header
