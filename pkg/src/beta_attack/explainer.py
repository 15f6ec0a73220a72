"""Edge-mask explainer over the surrogate detector.

A small network scores every directed edge of the graph for one target
node. Node attributes are augmented with an attention-weighted summary of
their in-neighbours, fused with the surrogate's own node embeddings, and the
edge logits are produced from ``[h_src, h_dst, h_target]``. Masks follow a
binary-concrete relaxation and scale the surrogate's attention messages.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import detector as det
from .artifacts import read_arrays, write_arrays, write_json
from .autodiff import AdamState, Tape, Tensor, adam_step
from .errors import ConfigError, DimensionError, EmptyNeighborhoodError, NonFiniteError, TrainingDivergedError
from .surrogate import SurrogateModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExplainerConfig:
    hidden: int = 32
    generator_hidden: int = 32
    tau_start: float = 0.5
    tau_end: float = 0.1
    sparsity: float = 0.005
    entropy: float = 0.1
    epochs: int = 60
    lr: float = 1e-3
    init_logit: float = 2.0          # bias of the last generator layer; masks start near one
    max_segments: int = 64
    relative: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ConfigError("temperatures must be positive")
        if self.epochs < 1 or self.hidden < 1 or self.generator_hidden < 1:
            raise ConfigError("epochs and widths must be positive")
        if self.sparsity < 0 or self.entropy < 0:
            raise ConfigError("regularization weights must be nonnegative")


@dataclass
class ExplainerNet:
    config: ExplainerConfig
    params: dict[str, np.ndarray]
    edges: list[tuple[int, int]]         # (src, dst), lexicographic
    target: int
    tau: float
    edge_importance: np.ndarray | None = None
    history: list[float] = field(default_factory=list)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)   # fixed input standardization
    mean_logit: np.ndarray | None = None

    @property
    def active(self) -> np.ndarray:
        """Edges inside the target's computation graph (the surrogate has one attention layer)."""
        return np.array([dst == self.target for _, dst in self.edges])


@dataclass
class ExplanationResult:
    target: int
    edge_mask: dict[tuple[int, int], float]
    top_edges: list[tuple[int, int]]
    candidates: list[int]
    fidelity: float | None = None

    def to_dict(self) -> dict:
        ranked = sorted(self.edge_mask.items(), key=lambda kv: (-kv[1], kv[0]))
        return {"target": self.target,
                "ranked_edges": [{"src": s, "dst": d, "mask": m} for (s, d), m in ranked],
                "top_edges": [list(e) for e in self.top_edges],
                "candidates": list(self.candidates),
                "fidelity": self.fidelity}

    def to_json(self, path: str | Path) -> None:
        write_json(path, self.to_dict())


# ----------------------------------------------------------------------------
# building blocks


def sample_mask(logits, tau: float, noise=None):
    """Binary-concrete mask ``sigmoid((log u - log(1-u) + logit) / tau)``.

    ``noise=None`` gives the deterministic evaluation mask ``sigmoid(logit/tau)``.
    Works on tensors (taped) and on plain arrays.
    """
    if tau <= 0:
        raise ConfigError("temperature must be positive")
    z = _concrete_logits(logits, tau, noise)
    return ad.sigmoid(z)


def _concrete_logits(logits, tau: float, noise=None):
    if noise is not None:
        u = np.asarray(noise, dtype=np.float64)
        if ((u <= 0) | (u >= 1)).any():
            raise ConfigError("concrete noise must lie strictly inside (0, 1)")
        logits = ad.add(logits, np.log(u) - np.log1p(-u))
    return ad.mul(logits, 1.0 / tau)


def augment_attributes(X, adjacency: np.ndarray, params: dict) -> Tensor:
    """``[x_i || sum_j alpha_ij x_j]`` over in-neighbours j of i; zeros for isolated nodes.

    ``alpha`` is a GAT-style softmax of ``LeakyReLU(a_self . x_i + a_nb . x_j)``.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.ndim == 2:
        X = ad.reshape(X, (1,) + X.shape)
    b, N, w = X.shape
    A = np.asarray(adjacency)
    if A.shape != (N, N):
        raise DimensionError(f"adjacency {A.shape} does not match {N} nodes")
    s_self = ad.matmul(X, ad.reshape(params["aug.self"], (w, 1)))
    s_nb = ad.transpose(ad.matmul(X, ad.reshape(params["aug.nb"], (w, 1))), (0, 2, 1))
    alpha = ad.masked_softmax(ad.leaky_relu(ad.add(s_self, s_nb), 0.2), (A.T > 0)[None], axis=-1, empty="zero")
    return ad.concat([X, ad.matmul(alpha, X)], axis=-1)


def init_explainer(surrogate: SurrogateModel, u: int, config: ExplainerConfig = ExplainerConfig()) -> ExplainerNet:
    cfg = surrogate.model.config
    rng = np.random.default_rng(config.seed)
    A = surrogate.model.adjacency
    edges = sorted(zip(*map(lambda a: a.tolist(), np.nonzero(A))))
    if not edges:
        raise ConfigError("graph has no edges to explain")
    if not any(dst == u for _, dst in edges):
        raise EmptyNeighborhoodError(f"target {u} has no in-neighbours to explain")
    w, d, H, G = cfg.window, cfg.dim, config.hidden, config.generator_hidden

    def unif(shape, fan_in):
        b = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-b, b, size=shape)

    fused_in = 2 * w + 3 * d
    params = {
        "aug.self": unif((w,), w),
        "aug.nb": unif((w,), w),
        "fuse.weight": unif((fused_in, H), fused_in),
        "fuse.bias": np.zeros(H),
        "gen.0.weight": unif((3 * H, G), 3 * H),
        "gen.0.bias": np.zeros(G),
        "gen.1.weight": unif((G, 1), G),
        "gen.1.bias": np.full(1, config.init_logit),
    }
    return ExplainerNet(config, params, edges, u, config.tau_start)


def _edge_scatter(edges: list[tuple[int, int]], n: int) -> np.ndarray:
    """(E, N*N) one-hot map putting edge j->i at attention entry [i, j]."""
    S = np.zeros((len(edges), n * n))
    for k, (src, dst) in enumerate(edges):
        S[k, dst * n + src] = 1.0
    return S


def edge_logits(net: ExplainerNet, params: dict, surrogate: SurrogateModel, X) -> Tensor:
    """Per-segment edge logits, shape (b, E)."""
    model = surrogate.model
    A = model.adjacency
    Xt = X if isinstance(X, Tensor) else Tensor(X)
    if Xt.ndim == 2:
        Xt = ad.reshape(Xt, (1,) + Xt.shape)
    fw = det.gdn_forward({k: Tensor(v) for k, v in model.params.items()}, Xt.values, A, model.config)
    emb = np.concatenate([fw.wx.values, fw.aggregate.values, fw.node_out.values], axis=-1)
    fused = ad.concat([augment_attributes(Xt, A, params), emb], axis=-1)
    if net.buffers:
        fused = ad.mul(ad.sub(fused, net.buffers["center"]), net.buffers["scale"])
    h = ad.relu(ad.add(ad.matmul(fused, params["fuse.weight"]), params["fuse.bias"]))
    src = [e[0] for e in net.edges]
    dst = [e[1] for e in net.edges]
    tgt = [net.target] * len(net.edges)
    z = ad.concat([ad.take(h, src, axis=1), ad.take(h, dst, axis=1), ad.take(h, tgt, axis=1)], axis=-1)
    z = ad.relu(ad.add(ad.matmul(z, params["gen.0.weight"]), params["gen.0.bias"]))
    z = ad.add(ad.matmul(z, params["gen.1.weight"]), params["gen.1.bias"])
    return ad.reshape(z, (z.shape[0], z.shape[1]))


def fusion_statistics(net: ExplainerNet, surrogate: SurrogateModel, segments: np.ndarray) -> dict[str, np.ndarray]:
    """Column centre and inverse spread of the fusion input at the initial parameters."""
    model = surrogate.model
    P = {k: Tensor(v) for k, v in net.params.items()}
    fw = det.gdn_forward({k: Tensor(v) for k, v in model.params.items()}, segments, model.adjacency, model.config)
    emb = np.concatenate([fw.wx.values, fw.aggregate.values, fw.node_out.values], axis=-1)
    fused = np.concatenate([augment_attributes(segments, model.adjacency, P).values, emb], axis=-1)
    flat = fused.reshape(-1, fused.shape[-1])
    sd = flat.std(axis=0)
    return {"center": flat.mean(axis=0), "scale": np.where(sd > 1e-12, 1.0 / np.maximum(sd, 1e-12), 1.0)}


def mask_matrix(mask, edges: list[tuple[int, int]], n: int) -> Tensor:
    """Scatter per-edge masks (b, E) into attention-shaped (b, N, N) multipliers."""
    mask = mask if isinstance(mask, Tensor) else Tensor(mask)
    flat = ad.matmul(mask, _edge_scatter(edges, n))
    return ad.reshape(flat, (mask.shape[0], n, n))


def _entropy(z) -> Tensor:
    # H(sigmoid(z)) = m softplus(-z) + (1 - m) softplus(z), stable for large |z|
    m = ad.sigmoid(z)
    return ad.add(ad.mul(m, ad.softplus(ad.neg(z))), ad.mul(ad.sub(1.0, m), ad.softplus(z)))


# ----------------------------------------------------------------------------
# training and extraction


def train_explainer(surrogate: SurrogateModel, segments: np.ndarray, observed: np.ndarray, u: int,
                    config: ExplainerConfig = ExplainerConfig()) -> ExplainerNet:
    """Fit the explainer so the masked surrogate score of ``u`` tracks the unmasked one.

    Loss: mean squared score difference + sparsity * sum(m) + entropy * mean H(m),
    with the size and entropy terms taken over the computation-graph edges
    (the others cannot change the score of ``u``). The temperature is
    annealed linearly from ``tau_start`` to ``tau_end``.
    """
    segments = np.asarray(segments, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if segments.ndim != 3 or len(segments) == 0:
        raise ConfigError("need at least one (N, w) training segment")
    net = init_explainer(surrogate, u, config)
    rng = np.random.default_rng(config.seed)
    if len(segments) > config.max_segments:
        keep = np.sort(rng.choice(len(segments), size=config.max_segments, replace=False))
        segments, observed = segments[keep], observed[keep]
    n = surrogate.model.config.n_nodes
    net.buffers = fusion_statistics(net, surrogate, segments)
    original = surrogate.target_score(segments, observed, u).values
    # squared differences are measured relative to the spread of the target score
    scale = 1.0 / max(float(np.var(original)), 1e-12) if config.relative else 1.0
    live = np.flatnonzero(net.active).tolist()
    names = list(net.params)
    values = [net.params[k] for k in names]
    state = AdamState.zeros_like(values)
    last = None
    for epoch in range(config.epochs):
        frac = epoch / max(config.epochs - 1, 1)
        tau = config.tau_start + (config.tau_end - config.tau_start) * frac
        noise = rng.uniform(1e-6, 1 - 1e-6, size=(len(segments), len(net.edges)))
        tape = Tape()
        try:
            P = {k: tape.watch(v) for k, v in zip(names, values)}
            z = _concrete_logits(edge_logits(net, P, surrogate, segments), tau, noise)
            m = ad.sigmoid(z)
            masked = surrogate.target_score(segments, observed, u, edge_mask=mask_matrix(m, net.edges, n))
            fid = ad.mul(ad.mean(ad.square(ad.sub(masked, original))), scale)
            size = ad.mean(ad.sum_(ad.take(m, live, axis=1), axis=1))
            ent = ad.mean(_entropy(ad.take(z, live, axis=1)))
            loss = ad.add(ad.add(fid, ad.mul(size, config.sparsity)), ad.mul(ent, config.entropy))
            grads = tape.gradients(loss, [P[k] for k in names])
            values, state = adam_step(values, grads, state, lr=config.lr)
            if not all(np.isfinite(v).all() for v in values):
                raise NonFiniteError("explainer parameters became non-finite")
        except NonFiniteError:
            raise TrainingDivergedError(last) from None
        last = loss.item()
        net.history.append(last)
    net.params = dict(zip(names, values))
    net.tau = config.tau_end
    net.edge_importance, net.mean_logit = evaluation_mask(net, surrogate, segments)
    return net


def evaluation_mask(net: ExplainerNet, surrogate: SurrogateModel, segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic mask ``sigmoid(logit / tau)`` of the segment-averaged logit, and that logit.

    Averaging logits rather than masks keeps the ranking intact where the
    sigmoid saturates. Edges outside the computation graph get importance 0.
    """
    P = {k: Tensor(v) for k, v in net.params.items()}
    logit = edge_logits(net, P, surrogate, segments).values.mean(axis=0)
    mask = sample_mask(logit, net.tau).values
    return np.where(net.active, mask, 0.0), logit


def rank_edges(edges: list[tuple[int, int]], importance: np.ndarray,
               tiebreak: np.ndarray | None = None) -> list[tuple[int, int]]:
    """Descending importance, then descending ``tiebreak`` (saturated masks), then lexicographic (src, dst)."""
    tb = np.zeros(len(edges)) if tiebreak is None else np.asarray(tiebreak)
    return [edges[k] for k in sorted(range(len(edges)), key=lambda k: (-importance[k], -tb[k], edges[k]))]


def fidelity(surrogate: SurrogateModel, u: int, kept: list[tuple[int, int]], segments: np.ndarray,
             observed: np.ndarray) -> float:
    """Mean |score with only ``kept`` edges - full score| for node ``u``."""
    n = surrogate.model.config.n_nodes
    hard = np.zeros((1, n, n))
    for src, dst in kept:
        hard[0, dst, src] = 1.0
    full = surrogate.target_score(segments, observed, u).values
    sub = surrogate.target_score(segments, observed, u, edge_mask=hard).values
    return float(np.mean(np.abs(sub - full)))


def extract_candidates(net: ExplainerNet, E: int, surrogate: SurrogateModel | None = None,
                       holdout: tuple[np.ndarray, np.ndarray] | None = None) -> ExplanationResult:
    """Top-``E`` edges by evaluation mask and the union of their endpoints.

    The target is not removed from the candidate set here; node selection
    excludes it.
    """
    if E < 1:
        raise ConfigError("E must be at least 1")
    if net.edge_importance is None:
        raise ConfigError("explainer has not been trained")
    if E > len(net.edges):
        warnings.warn(f"E={E} exceeds the {len(net.edges)} edges; keeping all", RuntimeWarning)
        E = len(net.edges)
    ranked = rank_edges(net.edges, net.edge_importance, net.mean_logit)
    top = ranked[:E]
    cands = sorted({v for e in top for v in e})
    fid = None
    if surrogate is not None and holdout is not None:
        fid = fidelity(surrogate, net.target, top, *holdout)
    masks = {e: float(m) for e, m in zip(net.edges, net.edge_importance)}
    return ExplanationResult(net.target, masks, top, cands, fid)


# ----------------------------------------------------------------------------
# persistence


def save_explainer(net: ExplainerNet, path: str | Path, header: dict | None = None) -> None:
    arrays = {f"param.{k}": v for k, v in net.params.items()}
    arrays.update({f"buffer.{k}": v for k, v in net.buffers.items()})
    if net.edge_importance is not None:
        arrays["importance"] = net.edge_importance
        arrays["mean_logit"] = net.mean_logit
    meta = {"config": asdict(net.config), "edges": [list(e) for e in net.edges], "target": net.target,
            "tau": net.tau, "history": net.history}
    write_arrays(path, arrays, {**(header or {}), "explainer": meta})


def load_explainer(path: str | Path) -> ExplainerNet:
    arrays, header = read_arrays(path)
    meta = header["explainer"]
    net = ExplainerNet(ExplainerConfig(**meta["config"]),
                       {k[6:]: v for k, v in arrays.items() if k.startswith("param.")},
                       [tuple(e) for e in meta["edges"]], meta["target"], meta["tau"],
                       arrays.get("importance"), list(meta["history"]),
                       {k[7:]: v for k, v in arrays.items() if k.startswith("buffer.")},
                       arrays.get("mean_logit"))
    return net
