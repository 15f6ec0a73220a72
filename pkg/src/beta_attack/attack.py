"""Budgeted evasion attacks on the node-level detector.

Every attack works on a batch of segments for one target node ``u``: node
selection picks the influencer rows, a perturbation routine edits only those
rows, and (when a victim is attached) success is the flip of the victim's
decision for ``u``. PGD-based attacks keep ``|X' - X| <= eps`` elementwise
and never touch row ``u``.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import atomic_write
from .autodiff import Tape
from .errors import BetaError, ConfigError
from .explainer import ExplainerConfig, ExplainerNet, extract_candidates, train_explainer
from .graph import CentralityVector, centrality, select_top_nodes
from .surrogate import SurrogateModel, Victim

logger = logging.getLogger(__name__)

SELECTIONS = ("gaf+centrality", "nettack", "random", "centrality-only", "all-nodes")
PERTURBATIONS = ("pgd", "nettack-feature", "uniform-random")
STRATEGIES = {
    "BETA": ("gaf+centrality", "pgd"),
    "PGD+Heuristics": ("nettack", "pgd"),
    "Nettack+GAF": ("gaf+centrality", "nettack-feature"),
    "Nettack": ("nettack", "nettack-feature"),
    "Random": ("random", "uniform-random"),
    "Unbudgeted": ("all-nodes", "pgd"),
    "Centrality-only": ("centrality-only", "pgd"),
}
NETTACK_SUPPRESS = 1e6


@dataclass(frozen=True)
class AttackSpec:
    budget: int = 5
    epsilon: float = 0.1
    alpha: float = 0.01
    iterations: int = 10
    restarts: int = 5
    edges: int | None = None              # explainer E; default max(1, B - 1)
    selection: str = "gaf+centrality"
    perturbation: str = "pgd"
    measure: str = "eigenvector"
    nettack_edits: int | None = None      # default B * w / 4
    early_stop: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0 or self.alpha <= 0:
            raise ConfigError("need epsilon >= 0 and alpha > 0")
        if self.iterations < 1 or self.restarts < 1:
            raise ConfigError("iterations and restarts must be at least 1")
        if self.budget < 1:
            raise ConfigError("budget must be at least 1")
        if self.edges is not None and self.edges < 1:
            raise ConfigError("explainer edge count must be at least 1")
        if self.selection not in SELECTIONS:
            raise ConfigError(f"unknown selection {self.selection!r}")
        if self.perturbation not in PERTURBATIONS:
            raise ConfigError(f"unknown perturbation {self.perturbation!r}")

    @property
    def explainer_edges(self) -> int:
        return self.edges if self.edges is not None else max(1, self.budget - 1)

    def edit_budget(self, window: int) -> int:
        return self.nettack_edits if self.nettack_edits is not None else max(1, self.budget * window // 4)

    def with_(self, **changes) -> "AttackSpec":
        return AttackSpec(**{**asdict(self), **changes})


@dataclass
class AttackResult:
    strategy: str
    target: int
    label: int
    influencers: list[int]
    original: np.ndarray
    perturbed: np.ndarray
    traces: np.ndarray | None = None      # (R, K + 1) surrogate losses per restart
    best_restart: int | None = None
    success: bool | None = None
    victim_before: int | None = None
    victim_after: int | None = None

    @property
    def delta(self) -> np.ndarray:
        return self.perturbed - self.original

    @property
    def linf(self) -> float:
        return float(np.abs(self.delta).max()) if self.delta.size else 0.0

    @property
    def perturbed_rows(self) -> list[int]:
        return np.flatnonzero(np.abs(self.delta).max(axis=1) > 0).tolist()

    def manifest(self, spec: AttackSpec | None = None) -> dict:
        return {"strategy": self.strategy, "target": self.target, "label": self.label,
                "influencers": list(self.influencers), "spec": None if spec is None else asdict(spec),
                "linf": self.linf, "perturbed_rows": self.perturbed_rows,
                "traces": None if self.traces is None else self.traces.tolist(),
                "best_restart": self.best_restart, "success": self.success,
                "victim_before": self.victim_before, "victim_after": self.victim_after}


def export_segment_csv(path: str | Path, result: AttackResult, sensor_ids: Sequence[str] | None = None) -> None:
    """One row per lag; original and perturbed columns for every sensor."""
    N, w = result.original.shape
    names = list(sensor_ids) if sensor_ids is not None else [f"s{i}" for i in range(N)]
    rows = [["lag"] + [f"{n}_orig" for n in names] + [f"{n}_adv" for n in names]]
    for k in range(w):
        rows.append([str(k - w)] + [repr(float(v)) for v in result.original[:, k]]
                    + [repr(float(v)) for v in result.perturbed[:, k]])
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    atomic_write(path, buf.getvalue())


def check_invariants(result: AttackResult, epsilon: float | None, budget: int | None, tol: float = 1e-12) -> list[str]:
    """Constraint violations of one result (empty list when feasible).

    ``epsilon=None`` skips the ball check (unbounded random baseline);
    ``budget=None`` skips the row count check.
    """
    bad = []
    d = result.delta
    if np.any(d[result.target] != 0):
        bad.append("target row perturbed")
    rows = result.perturbed_rows
    if not set(rows) <= set(result.influencers):
        bad.append(f"rows {sorted(set(rows) - set(result.influencers))} perturbed outside the influencer set")
    if budget is not None and len(result.influencers) > budget:
        bad.append(f"{len(result.influencers)} influencers exceed budget {budget}")
    if result.target in result.influencers:
        bad.append("target selected as influencer")
    if epsilon is not None:
        if result.linf > epsilon + tol:
            bad.append(f"linf {result.linf} exceeds epsilon {epsilon}")
        inside = (result.original >= 0) & (result.original <= 1)
        if np.any(inside & ((result.perturbed < 0) | (result.perturbed > 1))):
            bad.append("perturbed value left [0, 1]")
    return bad


# ----------------------------------------------------------------------------
# PGD primitives


def _row_mask(shape: tuple[int, ...], rows: Sequence[int]) -> np.ndarray:
    m = np.zeros(shape[-2], dtype=bool)
    m[list(rows)] = True
    return np.broadcast_to(m[:, None], shape[-2:])


def project(X: np.ndarray, X_orig: np.ndarray, epsilon: float, rows: Sequence[int]) -> np.ndarray:
    """Project onto the eps-ball around ``X_orig`` on ``rows``, then clip to the feature range.

    The range is [0, 1] widened to include the original value, so the clip
    never pushes a cell outside its eps-ball. Other rows equal ``X_orig``.
    """
    X_orig = np.broadcast_to(X_orig, X.shape)
    Y = np.clip(X, X_orig - epsilon, X_orig + epsilon)
    Y = np.clip(Y, np.minimum(0.0, X_orig), np.maximum(1.0, X_orig))
    return np.where(_row_mask(X.shape, rows), Y, X_orig)


def init_perturbation(X: np.ndarray, epsilon: float, rows: Sequence[int], rng: np.random.Generator,
                      restarts: int | None = None) -> np.ndarray:
    """Uniform start in the eps-ball on ``rows`` (``X`` elsewhere).

    With ``restarts`` the result has a leading restart axis.
    """
    X = np.asarray(X, dtype=np.float64)
    shape = X.shape if restarts is None else (restarts,) + X.shape
    noise = rng.uniform(-epsilon, epsilon, size=shape)
    return np.where(_row_mask(shape, rows), X + noise, np.broadcast_to(X, shape))


def pgd_step(X_k: np.ndarray, grad: np.ndarray, alpha: float, epsilon: float, X_orig: np.ndarray,
             rows: Sequence[int]) -> np.ndarray:
    """Sign-gradient ascent step followed by :func:`project`."""
    return project(X_k + alpha * np.sign(grad), X_orig, epsilon, rows)


LossFn = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def surrogate_loss_fn(surrogate: SurrogateModel, observed: np.ndarray, u: int, y: np.ndarray) -> LossFn:
    """Per-segment BCE of ``sigmoid(score_u - thr_u)`` against ``y`` and its input gradient.

    ``observed`` and ``y`` are broadcast against the leading batch axis of
    the segments passed to the returned function.
    """
    thr = surrogate.threshold(u)
    observed = np.asarray(observed, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)

    def fn(Xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        lead = Xb.shape[:-2]
        flat = Xb.reshape((-1,) + Xb.shape[-2:])
        obs = np.broadcast_to(observed, lead + observed.shape[-1:]).reshape(-1, observed.shape[-1])
        yy = np.broadcast_to(y, lead).reshape(-1)
        tape = Tape()
        Xt = tape.watch(flat)
        s = surrogate.target_score(Xt, obs, u)
        losses = ad.bce_with_logits(ad.sub(s, thr), yy)
        g = tape.gradients(ad.sum_(losses), [Xt])[0]
        return losses.values.reshape(lead), g.reshape(Xb.shape)

    return fn


def pgd_attack(loss_fn: LossFn, X: np.ndarray, rows: Sequence[int], spec: AttackSpec, rng: np.random.Generator,
               stop_fn: Callable[[np.ndarray], np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Restarted PGD on a batch ``X`` of shape (S, N, w).

    Returns the best perturbed batch (S, N, w), the loss traces (S, R, K+1)
    and the chosen restart per segment (maximum final loss, lowest index on
    ties). ``stop_fn`` (early stopping) maps the (R, S, N, w) iterate to a
    boolean "already fooled" array of shape (R, S).
    """
    X = np.asarray(X, dtype=np.float64)
    R, K = spec.restarts, spec.iterations
    Xk = init_perturbation(X, spec.epsilon, rows, rng, restarts=R)       # (R, S, N, w)
    Xk = project(Xk, X, spec.epsilon, rows)
    traces = np.zeros((R, X.shape[0], K + 1))
    loss, g = loss_fn(Xk)
    traces[..., 0] = loss
    done = np.zeros((R, X.shape[0]), dtype=bool)
    for k in range(K):
        step = pgd_step(Xk, g, spec.alpha, spec.epsilon, X, rows)
        Xk = np.where(done[..., None, None], Xk, step)
        loss, g = loss_fn(Xk)
        traces[..., k + 1] = loss
        if stop_fn is not None:
            done |= stop_fn(Xk)
            if done.all():
                traces[..., k + 2:] = loss[..., None]
                break
    final = traces[..., -1]                                                 # (R, S)
    best = np.argmax(final, axis=0)                                         # first max on ties
    Xbest = Xk[best, np.arange(X.shape[0])]
    return Xbest, np.transpose(traces, (1, 0, 2)), best


# ----------------------------------------------------------------------------
# Nettack-style baselines


def normalized_two_hop(adjacency: np.ndarray) -> np.ndarray:
    """``(D^-1/2 (A | A^T + I) D^-1/2)^2`` on the undirected view."""
    A = np.asarray(adjacency, dtype=np.float64)
    U = np.maximum(A, A.T)
    np.fill_diagonal(U, 1.0)
    d = 1.0 / np.sqrt(U.sum(axis=1))
    Ah = d[:, None] * U * d[None, :]
    return Ah @ Ah


def fit_linear_weights(adjacency: np.ndarray, segments: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """Least-squares feature weights (w + 1,) of the linearized model ``logit ~ (A2 X) W + b``."""
    A2 = normalized_two_hop(adjacency)
    F = np.einsum("ij,sjw->siw", A2, np.asarray(segments, dtype=np.float64))
    F = F.reshape(-1, F.shape[-1])
    F = np.concatenate([F, np.ones((len(F), 1))], axis=1)
    W, *_ = np.linalg.lstsq(F, np.asarray(logits, dtype=np.float64).reshape(-1), rcond=None)
    return W


def nettack_scores(adjacency: np.ndarray, weights: np.ndarray, X: np.ndarray, u: int, y: int,
                   epsilon: float, candidates: Sequence[int]) -> np.ndarray:
    """Margin of the true class of ``u`` after the best linear eps-edit of each candidate's row.

    Class logits are ``[-z/2, z/2]`` with ``z = (A2 X W)_u + b``; the margin is
    the true-class logit minus the maximum logit after subtracting a large
    constant from the true class.
    """
    A2 = normalized_two_hop(adjacency)
    w, b = weights[:-1], weights[-1]
    cls = np.stack([-0.5 * w, 0.5 * w], axis=1)                             # (w, 2)
    bias = np.array([-0.5 * b, 0.5 * b])
    base = A2[u] @ np.asarray(X) @ cls + bias                                # (2,)
    direction = cls[:, y] - cls[:, 1 - y]                                    # d margin / d x_c, up to A2[u, c]
    out = []
    for c in candidates:
        # move row c by -eps * sign(direction); each class logit shifts linearly
        shift = -epsilon * A2[u, c] * (np.sign(direction) @ cls)            # (2,)
        logits = base + shift
        suppressed = logits - NETTACK_SUPPRESS * np.eye(2)[y]
        out.append(logits[y] - suppressed.max())
    return np.asarray(out)


def nettack_select(adjacency: np.ndarray, weights: np.ndarray, X: np.ndarray, u: int, y: int, budget: int,
                   epsilon: float, fallback: CentralityVector | None = None) -> list[int]:
    """``budget`` lowest-margin candidates: one-hop neighbours of ``u`` first, then two-hop, then the rest."""
    A = np.asarray(adjacency)
    N = A.shape[0]
    if budget >= N:
        raise ConfigError(f"budget {budget} must be smaller than the graph size {N}")
    U = np.maximum(A, A.T)
    one = [j for j in np.flatnonzero(U[u]).tolist() if j != u]
    if not one:
        warnings.warn(f"target {u} is isolated; falling back to centrality ranking", RuntimeWarning)
        fb = fallback if fallback is not None else centrality(A, "degree")
        return [i for i in fb.ranking() if i != u][:budget]
    two = sorted({k for j in one for k in np.flatnonzero(U[j]).tolist()} - set(one) - {u})
    rest = sorted(set(range(N)) - set(one) - set(two) - {u})
    chosen: list[int] = []
    for tier in (one, two, rest):
        if len(chosen) >= budget:
            break
        sc = nettack_scores(A, weights, X, u, y, epsilon, tier)
        order = sorted(range(len(tier)), key=lambda k: (sc[k], tier[k]))
        chosen += [tier[k] for k in order][:budget - len(chosen)]
    return chosen


def nettack_feature_perturb(loss_fn: LossFn, X: np.ndarray, nodes: Sequence[int], epsilon: float,
                            edits: int) -> np.ndarray:
    """Greedy coordinate attack on a batch ``X`` (S, N, w).

    Each iteration evaluates the loss gradient, picks (per segment) the
    not-yet-edited cell of ``nodes`` with the largest ``|grad|`` and sets it
    to ``x +- eps`` in the ascent direction, range-clipped as in PGD.
    """
    X = np.asarray(X, dtype=np.float64)
    if not len(nodes):
        raise ConfigError("nettack feature attack needs at least one node")
    S, N, w = X.shape
    allowed = np.zeros((N, w), dtype=bool)
    allowed[list(nodes)] = True
    free = np.broadcast_to(allowed, X.shape).copy()
    Xk = X.copy()
    lo, hi = np.minimum(0.0, X), np.maximum(1.0, X)
    idx = np.arange(S)
    for _ in range(min(edits, int(allowed.sum()))):
        _, g = loss_fn(Xk)
        score = np.where(free, np.abs(g), -1.0).reshape(S, -1)
        flat = np.argmax(score, axis=1)
        i, t = np.unravel_index(flat, (N, w))
        direction = np.where(g[idx, i, t] >= 0, 1.0, -1.0)
        Xk[idx, i, t] = np.clip(X[idx, i, t] + direction * epsilon, lo[idx, i, t], hi[idx, i, t])
        free[idx, i, t] = False
    return Xk


def random_attack(X: np.ndarray, budget: int, u: int, rng: np.random.Generator, lower: np.ndarray,
                  upper: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Replace ``budget`` random non-target rows with U(min_j, max_j) draws (not eps-bounded)."""
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[-2]
    if not 1 <= budget <= N - 1:
        raise ConfigError(f"budget must lie in [1, {N - 1}]")
    nodes = sorted(rng.choice([j for j in range(N) if j != u], size=budget, replace=False).tolist())
    return uniform_replace(X, nodes, lower, upper, rng), nodes


def uniform_replace(X: np.ndarray, nodes: Sequence[int], lower: np.ndarray, upper: np.ndarray,
                    rng: np.random.Generator) -> np.ndarray:
    """Copy of ``X`` whose ``nodes`` rows are redrawn from U(lower_j, upper_j)."""
    nodes = list(nodes)
    Xp = np.array(X, dtype=np.float64)
    lo = np.asarray(lower, dtype=np.float64)[nodes, None]
    hi = np.asarray(upper, dtype=np.float64)[nodes, None]
    Xp[..., nodes, :] = lo + (hi - lo) * rng.random(Xp[..., nodes, :].shape)
    return Xp


# ----------------------------------------------------------------------------
# composition


@dataclass
class AttackContext:
    """Everything the attacker holds: surrogate, the known graph and observed data."""

    surrogate: SurrogateModel
    adjacency: np.ndarray
    lower: np.ndarray                       # per-node feature bounds for the random baseline
    upper: np.ndarray
    explainer_segments: tuple[np.ndarray, np.ndarray]   # (segments, observed) for explainer fitting
    explainer_config: ExplainerConfig = ExplainerConfig()
    linear_weights: np.ndarray | None = None
    victim: Victim | None = None
    _explainers: dict[int, ExplainerNet] = field(default_factory=dict)
    _centrality: dict[str, CentralityVector] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def centrality(self, measure: str) -> CentralityVector:
        if measure not in self._centrality:
            self._centrality[measure] = centrality(self.adjacency, measure)
        return self._centrality[measure]

    def explainer(self, u: int) -> ExplainerNet:
        if u not in self._explainers:
            segs, obs = self.explainer_segments
            self._explainers[u] = train_explainer(self.surrogate, segs, obs, u, self.explainer_config)
        return self._explainers[u]

    def nettack_weights(self) -> np.ndarray:
        if self.linear_weights is None:
            segs, obs = self.explainer_segments
            sur = self.surrogate
            logits = sur.scores(segs, obs) - sur.calibration.threshold
            self.linear_weights = fit_linear_weights(self.adjacency, segs, logits)
        return self.linear_weights


def select_nodes(ctx: AttackContext, spec: AttackSpec, X: np.ndarray, u: int, y: int,
                 rng: np.random.Generator) -> list[int]:
    N = ctx.n_nodes
    if not 0 <= u < N:
        raise ConfigError(f"target {u} is not a node of the graph")
    sel = spec.selection
    if sel == "all-nodes":
        return [j for j in range(N) if j != u]
    if spec.budget > N - 1:
        raise ConfigError(f"budget {spec.budget} exceeds the {N - 1} non-target nodes")
    if sel == "random":
        return sorted(rng.choice([j for j in range(N) if j != u], size=spec.budget, replace=False).tolist())
    cent = ctx.centrality(spec.measure)
    if sel == "centrality-only":
        return select_top_nodes(range(N), spec.budget, cent, u)
    if sel == "nettack":
        return nettack_select(ctx.adjacency, ctx.nettack_weights(), X, u, y, spec.budget, spec.epsilon, cent)
    try:
        expl = extract_candidates(ctx.explainer(u), spec.explainer_edges)
        cands = expl.candidates
    except BetaError as exc:
        warnings.warn(f"explainer failed for target {u} ({exc}); using centrality-only selection", RuntimeWarning)
        cands = list(range(N))
    return select_top_nodes(cands, spec.budget, cent, u)


def run_strategy(tag: str, ctx: AttackContext, X: np.ndarray, observed: np.ndarray, u: int, y,
                 spec: AttackSpec = AttackSpec(), rng: np.random.Generator | None = None) -> list[AttackResult]:
    """Attack every segment of the batch ``X`` (S, N, w) against target ``u``.

    ``tag`` is one of :data:`STRATEGIES` and overrides the selection and
    perturbation fields of ``spec``; ``y`` holds the true labels of ``u``.
    """
    if tag not in STRATEGIES:
        raise ConfigError(f"unknown strategy {tag!r}; choose from {sorted(STRATEGIES)}")
    sel, pert = STRATEGIES[tag]
    spec = spec.with_(selection=sel, perturbation=pert)
    return run_attack(ctx, X, observed, u, y, spec, rng, tag)


def run_attack(ctx: AttackContext, X: np.ndarray, observed: np.ndarray, u: int, y, spec: AttackSpec,
               rng: np.random.Generator | None = None, tag: str | None = None) -> list[AttackResult]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X, observed = X[None], np.asarray(observed)[None]
    S = len(X)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (S,))
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    tag = tag or f"{spec.selection}/{spec.perturbation}"

    # node selection, grouped so that segments sharing an influencer set are attacked together
    sets = [tuple(select_nodes(ctx, spec, X[s], u, int(y[s]), rng)) for s in range(S)]
    adv = X.copy()
    traces: list[np.ndarray | None] = [None] * S
    best: list[int | None] = [None] * S
    for rows in sorted(set(sets)):
        idx = np.array([s for s in range(S) if sets[s] == rows])
        Xg, obs, yg = X[idx], np.asarray(observed)[idx], y[idx]
        if spec.perturbation == "uniform-random":
            adv[idx] = uniform_replace(Xg, rows, ctx.lower, ctx.upper, rng)
            continue
        loss_fn = surrogate_loss_fn(ctx.surrogate, obs, u, yg)
        if spec.perturbation == "nettack-feature":
            adv[idx] = nettack_feature_perturb(loss_fn, Xg, rows, spec.epsilon, spec.edit_budget(X.shape[-1]))
            continue
        stop = None
        if spec.early_stop:
            thr = ctx.surrogate.threshold(u)

            def stop(Xk, obs=obs, yg=yg):
                flat = Xk.reshape((-1,) + Xk.shape[-2:])
                ob = np.broadcast_to(obs, Xk.shape[:2] + obs.shape[-1:]).reshape(-1, obs.shape[-1])
                s = ctx.surrogate.scores(flat, ob)[:, u].reshape(Xk.shape[:2])
                return (s > thr).astype(np.int64) != yg[None, :]
        Xb, tr, bi = pgd_attack(loss_fn, Xg, rows, spec, rng, stop)
        adv[idx] = Xb
        for k, s in enumerate(idx):
            traces[s], best[s] = tr[k], int(bi[k])

    before = after = None
    if ctx.victim is not None:
        before = ctx.victim.decide_batch(X, observed, u)
        after = ctx.victim.decide_batch(adv, observed, u)
    results = []
    for s in range(S):
        results.append(AttackResult(
            strategy=tag, target=u, label=int(y[s]), influencers=list(sets[s]), original=X[s], perturbed=adv[s],
            traces=traces[s], best_restart=best[s],
            success=None if before is None else bool(before[s] != after[s]),
            victim_before=None if before is None else int(before[s]),
            victim_after=None if after is None else int(after[s])))
    return results


def beta_attack(ctx: AttackContext, X: np.ndarray, observed: np.ndarray, u: int, y,
                spec: AttackSpec = AttackSpec(), rng: np.random.Generator | None = None) -> list[AttackResult]:
    """Explainer-guided, centrality-pruned, restarted PGD (the BETA composition)."""
    return run_attack(ctx, X, observed, u, y, spec.with_(selection="gaf+centrality", perturbation="pgd"), rng, "BETA")
