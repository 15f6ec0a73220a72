"""Attacker side model: victim query access and the surrogate detector.

The victim is wrapped so that attack code only ever sees binary node-level
decisions. The surrogate is an independently configured GDN trained on
normal data the attacker can observe; its per-target threshold is fitted to
the victim's logged decisions.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import detector as det
from .artifacts import atomic_write
from .autodiff import Tensor
from .data import TimeSeriesDataset, sliding_windows, stack_segments
from .detector import GdnConfig, GdnModel, ScoreCalibration
from .errors import CalibrationError, ConfigError, StateError

logger = logging.getLogger(__name__)


class Victim:
    """Query-only facade over a trained, calibrated detector."""

    def __init__(self, model: GdnModel, name: str = "victim"):
        if model.calibration is None:
            raise StateError("victim must be calibrated before it can be queried")
        self._model = model
        self.name = name
        self.queries = 0

    @property
    def n_nodes(self) -> int:
        return self._model.config.n_nodes

    def decide(self, segment: np.ndarray, observed: np.ndarray, node: int) -> int:
        return int(self.decide_batch(np.asarray(segment)[None], np.asarray(observed)[None], node)[0])

    def decide_batch(self, segments: np.ndarray, observed: np.ndarray, node: int | None = None) -> np.ndarray:
        """Strict-exceedance decisions for ``node`` (or every node) on a batch."""
        segments = np.asarray(segments, dtype=np.float64)
        self.queries += len(segments)
        s = det.score(self._model, self._model.calibration, segments, observed)
        return det.detect_node(s, self._model.calibration.threshold, node).astype(np.int64)


@dataclass
class QueryLog:
    target: int
    victim: str
    windows: list[dict]              # {"split", "index", "target_time"} references
    labels: np.ndarray               # victim decisions, 0/1
    segments: np.ndarray | None = None   # (l, N, w), kept in memory only
    observed: np.ndarray | None = None   # (l, N)

    @property
    def count(self) -> int:
        return len(self.labels)

    def to_jsonl(self, path: str | Path, header: dict | None = None) -> None:
        head = {**(header or {}), "target": self.target, "victim": self.victim, "count": self.count}
        lines = [json.dumps(head, sort_keys=True)]
        for ref, y in zip(self.windows, self.labels):
            lines.append(json.dumps({**ref, "label": int(y)}, sort_keys=True))
        atomic_write(path, "\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, dataset: TimeSeriesDataset | None = None) -> "QueryLog":
        rows = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        head, body = rows[0], rows[1:]
        refs = [{k: r[k] for k in ("split", "index", "target_time")} for r in body]
        log = cls(head["target"], head["victim"], refs, np.array([r["label"] for r in body], dtype=np.int64))
        if dataset is not None:
            log.segments, log.observed = _materialize(dataset, refs)
        return log

    def subset(self, idx: Sequence[int]) -> "QueryLog":
        idx = np.asarray(idx, dtype=np.int64)
        return QueryLog(self.target, self.victim, [self.windows[i] for i in idx], self.labels[idx],
                        None if self.segments is None else self.segments[idx],
                        None if self.observed is None else self.observed[idx])


def _materialize(dataset: TimeSeriesDataset, refs: Sequence[dict]) -> tuple[np.ndarray, np.ndarray]:
    X = dataset.normalized
    w = dataset.window
    feats = np.stack([X[r["target_time"] - w:r["target_time"]].T for r in refs])
    obs = np.stack([X[r["target_time"]] for r in refs])
    return feats, obs


def query_windows(dataset: TimeSeriesDataset, splits: Sequence[str] = ("val", "test")) -> tuple[list[dict], np.ndarray, np.ndarray]:
    refs, feats, obs = [], [], []
    for split in splits:
        segs = sliding_windows(dataset, split)
        for k, s in enumerate(segs):
            refs.append({"split": split, "index": k, "target_time": int(s.target_time)})
        if segs:
            X, Y, _ = stack_segments(segs)
            feats.append(X)
            obs.append(Y)
    return refs, np.concatenate(feats), np.concatenate(obs)


def query_victim(victim: Victim, segments: np.ndarray, observed: np.ndarray, u: int,
                 windows: list[dict] | None = None) -> QueryLog:
    """Record the victim's decision for node ``u`` on every segment."""
    if not 0 <= u < victim.n_nodes:
        raise ConfigError(f"target {u} outside 0..{victim.n_nodes - 1}")
    labels = victim.decide_batch(segments, observed, u)
    refs = windows if windows is not None else [{"split": "", "index": i, "target_time": -1} for i in range(len(labels))]
    return QueryLog(u, victim.name, list(refs), labels, np.asarray(segments), np.asarray(observed))


# ----------------------------------------------------------------------------
# surrogate


@dataclass
class SurrogateModel:
    model: GdnModel                   # forecaster, adjacency fixed
    thresholds: dict[int, float] = field(default_factory=dict)
    agreement: dict[int, float] = field(default_factory=dict)

    @property
    def calibration(self) -> ScoreCalibration:
        return self.model.calibration

    def threshold(self, u: int) -> float:
        if u not in self.thresholds:
            raise StateError(f"no threshold fitted for target {u}")
        return self.thresholds[u]

    def scores(self, segments: np.ndarray, observed: np.ndarray) -> np.ndarray:
        return det.score(self.model, self.calibration, segments, observed)

    def decide(self, segments: np.ndarray, observed: np.ndarray, u: int) -> np.ndarray:
        return (self.scores(segments, observed)[..., u] > self.threshold(u)).astype(np.int64)

    def target_score(self, X, observed: np.ndarray, u: int, params: dict[str, Tensor] | None = None,
                     edge_mask=None) -> Tensor:
        """Differentiable normalized score of node ``u``; ``X`` is (b, N, w) or (N, w)."""
        P = params if params is not None else {k: Tensor(v) for k, v in self.model.params.items()}
        out = det.gdn_forward(P, X, self.model.adjacency, self.model.config, edge_mask)
        pred = ad.take(out.prediction, [u], axis=1)                          # (b, 1)
        obs = np.asarray(observed, dtype=np.float64).reshape(-1, self.model.config.n_nodes)[:, [u]]
        err = ad.abs_(ad.sub(obs, pred))
        cal = self.calibration
        return ad.reshape(ad.div(ad.sub(err, cal.median[u]), cal.iqr[u]), (-1,))


def fit_forecaster(dataset: TimeSeriesDataset, config: GdnConfig, seed: int,
                   adjacency: np.ndarray | None = None) -> GdnModel:
    """Train the surrogate forecaster on the (normal) training split and calibrate on validation.

    With ``adjacency`` given (grey-box default) the graph is held fixed;
    otherwise the surrogate learns its own from its embeddings.
    """
    model = det.init_model(config, seed)
    model = det.train(model, dataset, fixed_adjacency=adjacency)
    model.calibration = det.calibrate(model, dataset)
    return model


def agreement(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.size == 0:
        raise ConfigError("agreement needs two equal-length non-empty label vectors")
    return float(np.mean(a == b))


def fit_threshold(scores: np.ndarray, labels: np.ndarray, fallback: float) -> tuple[float, float]:
    """Threshold maximizing agreement of ``scores > thr`` with ``labels``.

    Candidates are the logged scores themselves plus one value below all of
    them; ties go to the candidate closest to ``fallback``. A single-class log
    yields ``fallback`` with a warning.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(scores) == 0:
        raise CalibrationError("empty query log")
    if labels.min() == labels.max():
        warnings.warn("query log holds a single class; using the validation-max threshold", RuntimeWarning)
        return float(fallback), agreement((scores > fallback).astype(np.int64), labels)
    cand = np.unique(np.concatenate([scores, [scores.min() - 1.0]]))
    dec = scores[None, :] > cand[:, None]
    agree = (dec == labels[None, :].astype(bool)).mean(axis=1)
    best = np.flatnonzero(agree == agree.max())
    pick = best[np.argmin(np.abs(cand[best] - fallback))]
    return float(cand[pick]), float(agree[pick])


def train_surrogate(log: QueryLog, dataset: TimeSeriesDataset, config: GdnConfig | None = None, seed: int = 1,
                    adjacency: np.ndarray | None = None, forecaster: GdnModel | None = None) -> SurrogateModel:
    """Fit (or reuse) the surrogate forecaster, then the target threshold on ``log``."""
    if log.count == 0:
        raise ConfigError("query log is empty")
    if log.segments is None:
        log.segments, log.observed = _materialize(dataset, log.windows)
    if forecaster is None:
        if config is None:
            raise ConfigError("need a surrogate config or a trained forecaster")
        forecaster = fit_forecaster(dataset, config, seed, adjacency)
    sur = SurrogateModel(forecaster)
    return fit_target(sur, log)


def fit_target(sur: SurrogateModel, log: QueryLog) -> SurrogateModel:
    u = log.target
    s = sur.scores(log.segments, log.observed)[:, u]
    thr, agr = fit_threshold(s, log.labels, sur.calibration.threshold)
    sur.thresholds[u] = thr
    sur.agreement[u] = agr
    logger.debug("target %d: threshold %.4f agreement %.4f", u, thr, agr)
    return sur


def split_log(log: QueryLog, holdout: float, seed: int) -> tuple[QueryLog, QueryLog]:
    """Deterministic random split into (fitting, held-out) logs."""
    if not 0.0 < holdout < 1.0:
        raise ConfigError("holdout fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(log.count)
    k = int(round(log.count * (1.0 - holdout)))
    return log.subset(np.sort(perm[:k])), log.subset(np.sort(perm[k:]))
