"""Learned sensor graph, centrality measures and budgeted node selection.

Adjacency convention: ``A[j, i] == 1`` means j is an in-neighbour of i, i.e.
j's window feeds i's attention aggregate. Centralities are computed on the
undirected view ``A | A.T``.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ConvergenceError, DegenerateEmbeddingError

logger = logging.getLogger(__name__)

MEASURES = ("eigenvector", "degree", "closeness", "betweenness", "clustering", "avg_neighbor_degree")


@dataclass(frozen=True)
class SensorGraph:
    adjacency: np.ndarray     # (N, N) {0, 1}
    embeddings: np.ndarray    # (N, d)
    max_neighbors: int

    def __post_init__(self):
        A = self.adjacency
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ConfigError("adjacency must be square")
        if not np.isin(A, (0, 1)).all():
            raise ConfigError("adjacency entries must be 0 or 1")
        if np.diag(A).any():
            raise ConfigError("self-loops are not allowed")
        if (A.sum(axis=0) > self.max_neighbors).any():
            raise ConfigError(f"a node has more than M={self.max_neighbors} in-neighbours")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def in_neighbors(self, i: int) -> list[int]:
        return np.flatnonzero(self.adjacency[:, i]).tolist()

    def edges(self) -> list[tuple[int, int]]:
        """Directed edges (src, dst) in lexicographic order."""
        src, dst = np.nonzero(self.adjacency)
        return sorted(zip(src.tolist(), dst.tolist()))

    def undirected(self) -> np.ndarray:
        return np.maximum(self.adjacency, self.adjacency.T)

    def to_json(self, path: str | Path) -> None:
        """Edge list in ``path``; embeddings in a ``.npy`` sidecar next to it."""
        path = Path(path)
        side = path.with_suffix(".embeddings.npy")
        payload = {"n_nodes": self.n_nodes, "max_neighbors": self.max_neighbors,
                   "edges": [list(e) for e in self.edges()], "embeddings": side.name}
        path.write_text(json.dumps(payload, indent=1, sort_keys=True))
        np.save(side, self.embeddings, allow_pickle=False)

    @classmethod
    def from_json(cls, path: str | Path) -> "SensorGraph":
        path = Path(path)
        payload = json.loads(path.read_text())
        n = payload["n_nodes"]
        A = np.zeros((n, n), dtype=np.int64)
        for s, d in payload["edges"]:
            A[s, d] = 1
        V = np.load(path.parent / payload["embeddings"], allow_pickle=False)
        return cls(A, V, payload["max_neighbors"])


def cosine_table(embeddings: np.ndarray) -> np.ndarray:
    """``G[j, i]`` = cosine similarity of v_i and v_j."""
    V = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(V, axis=1)
    if (norms == 0).any():
        raise DegenerateEmbeddingError(f"zero-norm embedding for nodes {np.flatnonzero(norms == 0).tolist()}")
    U = V / norms[:, None]
    return U @ U.T


def learn_adjacency(embeddings: np.ndarray, max_neighbors: int,
                    candidates: Sequence[Iterable[int]] | None = None) -> SensorGraph:
    """Keep, for every node i, the ``max_neighbors`` most cosine-similar candidates j.

    ``candidates[i]`` restricts the pool of node i (default: every other node).
    Ties go to the lower node index.
    """
    V = np.asarray(embeddings, dtype=np.float64)
    N = V.shape[0]
    if not 1 <= max_neighbors < N:
        raise ConfigError(f"need 1 <= M < N, got M={max_neighbors}, N={N}")
    G = cosine_table(V)
    A = np.zeros((N, N), dtype=np.int64)
    for i in range(N):
        pool = [j for j in range(N) if j != i] if candidates is None else sorted({j for j in candidates[i] if j != i})
        # stable sort on -score keeps index order among equal scores
        ranked = sorted(pool, key=lambda j: -G[j, i])
        A[ranked[:max_neighbors], i] = 1
    return SensorGraph(A, V.copy(), max_neighbors)


# ----------------------------------------------------------------------------
# centrality


@dataclass(frozen=True)
class CentralityVector:
    measure: str
    scores: np.ndarray

    def ranking(self, nodes: Iterable[int] | None = None) -> list[int]:
        """Nodes ordered by descending score, ties by lower index."""
        pool = range(len(self.scores)) if nodes is None else nodes
        return sorted(pool, key=lambda i: (-self.scores[i], i))


def eigenvector_centrality(U: np.ndarray, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Perron vector of a symmetric 0/1 matrix by power iteration on ``U + I``.

    The shift keeps bipartite graphs from oscillating and leaves the
    eigenvectors unchanged. Starts from all ones; the result has unit norm.
    """
    N = U.shape[0]
    if not U.any():
        raise ConfigError("eigenvector centrality needs at least one edge")
    M = U + np.eye(N)
    x = np.ones(N) / np.sqrt(N)
    for _ in range(max_iter):
        y = M @ x
        y /= np.linalg.norm(y)
        if np.linalg.norm(y - x) < tol:
            x = y
            break
        x = y
    else:
        lam = x @ U @ x
        raise ConvergenceError("power iteration did not converge", float(np.linalg.norm(U @ x - lam * x)))
    return x


def _bfs_distances(adj: list[list[int]], s: int) -> np.ndarray:
    dist = np.full(len(adj), -1)
    dist[s] = 0
    q = deque([s])
    while q:
        v = q.popleft()
        for w in adj[v]:
            if dist[w] < 0:
                dist[w] = dist[v] + 1
                q.append(w)
    return dist


def brandes_betweenness(adj: list[list[int]]) -> np.ndarray:
    """Undirected betweenness, normalized by the pair count (n-1)(n-2)/2."""
    n = len(adj)
    cb = np.zeros(n)
    for s in range(n):
        stack = []
        preds = [[] for _ in range(n)]
        sigma = np.zeros(n)
        sigma[s] = 1
        dist = np.full(n, -1)
        dist[s] = 0
        q = deque([s])
        while q:
            v = q.popleft()
            stack.append(v)
            for w in adj[v]:
                if dist[w] < 0:
                    dist[w] = dist[v] + 1
                    q.append(w)
                if dist[w] == dist[v] + 1:
                    sigma[w] += sigma[v]
                    preds[w].append(v)
        delta = np.zeros(n)
        while stack:
            w = stack.pop()
            for v in preds[w]:
                delta[v] += sigma[v] / sigma[w] * (1 + delta[w])
            if w != s:
                cb[w] += delta[w]
    cb /= 2.0  # each unordered pair was counted from both ends
    pairs = (n - 1) * (n - 2) / 2
    return cb / pairs if pairs > 0 else cb


def closeness(adj: list[list[int]]) -> np.ndarray:
    """Classic closeness (n-1)/sum(d) on connected graphs, harmonic otherwise."""
    n = len(adj)
    if n == 1:
        return np.zeros(1)
    D = np.stack([_bfs_distances(adj, s) for s in range(n)])
    if (D >= 0).all():
        return (n - 1) / D.sum(axis=1)
    inv = np.where(D > 0, 1.0 / np.where(D > 0, D, 1), 0.0)
    return inv.sum(axis=1) / (n - 1)


def clustering(U: np.ndarray) -> np.ndarray:
    deg = U.sum(axis=1)
    tri = np.diag(U @ U @ U) / 2.0
    possible = deg * (deg - 1) / 2.0
    return np.where(possible > 0, tri / np.where(possible > 0, possible, 1), 0.0)


def centrality(graph: SensorGraph | np.ndarray, measure: str = "eigenvector") -> CentralityVector:
    """Centrality of every node on the undirected view of ``graph``."""
    A = graph.adjacency if isinstance(graph, SensorGraph) else np.asarray(graph)
    if A.shape[0] == 0:
        raise ConfigError("empty graph")
    U = np.maximum(A, A.T).astype(np.float64)
    np.fill_diagonal(U, 0.0)
    n = U.shape[0]
    adj = [np.flatnonzero(U[i]).tolist() for i in range(n)]
    deg = U.sum(axis=1)
    if measure == "eigenvector":
        scores = eigenvector_centrality(U)
    elif measure == "degree":
        scores = deg / max(n - 1, 1)
    elif measure == "closeness":
        scores = closeness(adj)
    elif measure == "betweenness":
        scores = brandes_betweenness(adj)
    elif measure == "clustering":
        scores = clustering(U)
    elif measure == "avg_neighbor_degree":
        scores = np.where(deg > 0, (U @ deg) / np.where(deg > 0, deg, 1), 0.0)
    else:
        raise ConfigError(f"unknown centrality measure {measure!r}; choose from {MEASURES}")
    return CentralityVector(measure, np.asarray(scores, dtype=np.float64))


def select_top_nodes(candidates: Iterable[int], budget: int, scores: CentralityVector,
                     exclude: int) -> list[int]:
    """Top-``budget`` candidates by centrality, never ``exclude``.

    When fewer than ``budget`` admissible candidates exist, the remaining
    slots are filled from all other non-excluded nodes in centrality order.
    """
    n = len(scores.scores)
    if budget < 1:
        raise ConfigError("budget must be at least 1")
    if budget >= n:
        raise ConfigError(f"budget {budget} must be smaller than the graph size {n}")
    pool = sorted({int(c) for c in candidates if int(c) != exclude})
    chosen = scores.ranking(pool)[:budget]
    if len(chosen) < budget:
        rest = [i for i in scores.ranking() if i != exclude and i not in chosen]
        chosen += rest[:budget - len(chosen)]
    return chosen
