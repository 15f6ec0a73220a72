"""In-memory experiment pipeline shared by the CLI stages and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import detector as det
from .attack import AttackContext, AttackSpec, run_strategy
from .config import ExperimentConfig
from .data import (CsvSchema, TimeSeriesDataset, inject_anomalies, load_csv, min_max_normalize, sliding_windows,
                   stack_segments, synthesize_network)
from .detector import GdnConfig, GdnModel
from .explainer import ExplainerConfig
from .metrics import ConfusionCounts, auc_pr, f1, fta
from .surrogate import (QueryLog, SurrogateModel, Victim, agreement, fit_forecaster, fit_target, query_victim,
                        query_windows, split_log)

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# stages as pure functions


def build_dataset(cfg: ExperimentConfig, seed: int) -> TimeSeriesDataset:
    d = cfg.dataset
    if d.source == "synthetic":
        ds = synthesize_network(d.n_sensors, d.n_steps, seed, d.coupling, window=d.window, stride=d.stride,
                                split_fractions=d.split_fractions, lag_window=d.lag_window, scale=d.scale,
                                ar_coef=d.ar_coef, sine_weight=d.sine_weight, noise=d.noise)
    else:
        ds = load_csv(d.source, CsvSchema(timestamp_column=d.timestamp_column, forward_fill=d.forward_fill,
                                          window=d.window, stride=d.stride, split_fractions=d.split_fractions))
    ds = min_max_normalize(ds, clip=d.clip)
    inj = d.injection
    if inj.rate > 0:
        ds = inject_anomalies(ds, inj.zeta, inj.lambda_var, inj.rate, seed + inj.seed_offset)
    return ds


def victim_config(cfg: ExperimentConfig, n_nodes: int) -> GdnConfig:
    m = cfg.model
    return GdnConfig(n_nodes=n_nodes, window=cfg.dataset.window, dim=m.dim, max_neighbors=m.max_neighbors,
                     head_widths=m.head_widths, leaky_slope=m.leaky_slope, w_init_scale=m.w_init_scale,
                     conv_kernels=m.conv_kernels if m.multi_scale else (), conv_pool=m.conv_pool,
                     epochs=m.epochs, lr=m.lr, batch_size=m.batch_size)


def surrogate_config(cfg: ExperimentConfig, n_nodes: int) -> GdnConfig:
    m, s = cfg.model, cfg.surrogate
    return GdnConfig(n_nodes=n_nodes, window=cfg.dataset.window, dim=s.dim, max_neighbors=m.max_neighbors,
                     head_widths=s.head_widths, w_init_scale=m.w_init_scale, epochs=s.epochs, lr=m.lr,
                     batch_size=m.batch_size)


def train_victim(cfg: ExperimentConfig, ds: TimeSeriesDataset, seed: int) -> GdnModel:
    model = det.train(det.init_model(victim_config(cfg, ds.n_sensors), seed), ds)
    model.calibration = det.calibrate(model, ds)
    return model


def explainer_config(cfg: ExperimentConfig, seed: int) -> ExplainerConfig:
    e = cfg.explainer
    return ExplainerConfig(hidden=e.hidden, generator_hidden=e.generator_hidden, tau_start=e.tau_start,
                           tau_end=e.tau_end, sparsity=e.sparsity, entropy=e.entropy, epochs=e.epochs, lr=e.lr,
                           init_logit=e.init_logit, max_segments=e.max_segments, relative=e.relative,
                           seed=seed)


def attack_spec(cfg: ExperimentConfig, seed: int, **changes) -> AttackSpec:
    a = cfg.attack
    spec = AttackSpec(budget=a.budget, epsilon=a.epsilon, alpha=a.alpha, iterations=a.iterations,
                      restarts=a.restarts, edges=a.edges, measure=a.measure, nettack_edits=a.nettack_edits,
                      early_stop=a.early_stop, seed=seed)
    return spec.with_(**changes) if changes else spec


def targets_of(cfg: ExperimentConfig, n_nodes: int) -> list[int]:
    return list(cfg.attack.targets) if cfg.attack.targets is not None else list(range(n_nodes))


@dataclass
class SurrogateBundle:
    surrogate: SurrogateModel
    logs: dict[int, QueryLog]
    holdout_agreement: dict[int, float]


def build_surrogate(cfg: ExperimentConfig, ds: TimeSeriesDataset, victim: Victim, victim_adjacency: np.ndarray,
                    seed: int, targets: list[int], forecaster: GdnModel | None = None) -> SurrogateBundle:
    """Query the victim for every target, fit the shared forecaster and per-target thresholds."""
    s = cfg.surrogate
    if forecaster is None:
        adj = victim_adjacency if s.use_victim_graph else None
        forecaster = fit_forecaster(ds, surrogate_config(cfg, ds.n_sensors), seed + s.seed_offset, adj)
    sur = SurrogateModel(forecaster)
    refs, feats, obs = query_windows(ds, s.query_splits)
    logs, held = {}, {}
    for u in targets:
        log = query_victim(victim, feats, obs, u, refs)
        fit, hold = split_log(log, s.holdout, seed + u)
        fit_target(sur, fit)
        held[u] = agreement(sur.decide(hold.segments, hold.observed, u), hold.labels)
        logs[u] = log
    return SurrogateBundle(sur, logs, held)


def attack_context(cfg: ExperimentConfig, ds: TimeSeriesDataset, bundle: SurrogateBundle,
                   victim_adjacency: np.ndarray, victim: Victim | None, seed: int) -> AttackContext:
    train = ds.normalized[ds.split_slice("train")]
    some_log = next(iter(bundle.logs.values()))
    return AttackContext(surrogate=bundle.surrogate, adjacency=victim_adjacency, lower=train.min(axis=0),
                         upper=train.max(axis=0), explainer_segments=(some_log.segments, some_log.observed),
                         explainer_config=explainer_config(cfg, seed), victim=victim)


def eval_windows(cfg: ExperimentConfig, ds: TimeSeriesDataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return stack_segments(sliding_windows(ds, "test", stride=cfg.attack.eval_stride))


# ----------------------------------------------------------------------------
# metric helpers


def metric_row(decisions: np.ndarray, scores: np.ndarray, labels: np.ndarray) -> dict:
    """F1 / AUC-PR / FTA over pooled (step, target) pairs."""
    c = ConfusionCounts.from_decisions(decisions, labels)
    row = {"f1": f1(c), "fta": fta(decisions, labels), "tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn}
    row["auc_pr"] = auc_pr(scores, labels) if labels.any() else float("nan")
    return row


@dataclass
class JobOutcome:
    strategy: str
    budget: int
    measure: str
    decisions: np.ndarray      # (S, T) victim decisions for each target after the attack
    scores: np.ndarray         # (S, T) victim normalized scores of each target
    success: np.ndarray        # (S, T) decision flipped
    influencers: dict[int, list[list[int]]]
    linf: float
    max_rows: int


def run_job(ctx: AttackContext, victim_model: GdnModel, X: np.ndarray, Y: np.ndarray, L: np.ndarray,
            targets: list[int], tag: str, spec: AttackSpec) -> JobOutcome:
    """Attack every evaluation window for every target with one strategy."""
    S = len(X)
    dec = np.zeros((S, len(targets)), dtype=np.int64)
    sc = np.zeros((S, len(targets)))
    succ = np.zeros((S, len(targets)), dtype=bool)
    infl: dict[int, list[list[int]]] = {}
    linf, rows = 0.0, 0
    cal = victim_model.calibration
    for k, u in enumerate(targets):
        rng = np.random.default_rng([spec.seed, u, spec.budget, sum(map(ord, tag))])
        res = run_strategy(tag, ctx, X, Y, u, L[:, u].astype(np.int64), spec, rng)
        adv = np.stack([r.perturbed for r in res])
        s_u = det.score(victim_model, cal, adv, Y)[:, u]
        sc[:, k] = s_u
        dec[:, k] = s_u > cal.threshold
        succ[:, k] = [bool(r.success) for r in res]
        infl[u] = [list(r.influencers) for r in res]
        linf = max(linf, max(r.linf for r in res))
        rows = max(rows, max(len(r.perturbed_rows) for r in res))
    return JobOutcome(tag, spec.budget, spec.measure, dec, sc, succ, infl, linf, rows)


@dataclass
class SeedExperiment:
    """Everything computed for one seed, kept in memory."""

    seed: int
    dataset: TimeSeriesDataset
    victim_model: GdnModel
    bundle: SurrogateBundle
    ctx: AttackContext
    X: np.ndarray
    Y: np.ndarray
    L: np.ndarray
    targets: list[int]
    cfg: ExperimentConfig = field(default_factory=ExperimentConfig)

    def clean_row(self) -> dict:
        cal = self.victim_model.calibration
        s = det.score(self.victim_model, cal, self.X, self.Y)[:, self.targets]
        return metric_row(s > cal.threshold, s, self.L[:, self.targets])

    def job(self, tag: str, budget: int | None = None, measure: str | None = None) -> JobOutcome:
        changes = {}
        if budget is not None:
            changes["budget"] = budget
        if measure is not None:
            changes["measure"] = measure
        spec = attack_spec(self.cfg, self.seed, **changes)
        return run_job(self.ctx, self.victim_model, self.X, self.Y, self.L, self.targets, tag, spec)


def prepare_seed(cfg: ExperimentConfig, seed: int) -> SeedExperiment:
    ds = build_dataset(cfg, seed)
    vm = train_victim(cfg, ds, seed)
    victim = Victim(vm)
    targets = targets_of(cfg, ds.n_sensors)
    bundle = build_surrogate(cfg, ds, victim, vm.adjacency, seed, targets)
    ctx = attack_context(cfg, ds, bundle, vm.adjacency, victim, seed)
    X, Y, L = eval_windows(cfg, ds)
    return SeedExperiment(seed, ds, vm, bundle, ctx, X, Y, L, targets, cfg)


# ----------------------------------------------------------------------------
# experiment families


@dataclass(frozen=True)
class Job:
    strategy: str
    budget: int
    measure: str

    @property
    def key(self) -> str:
        tag = self.strategy.replace("+", "_plus_").replace(" ", "_")
        return f"{tag}-B{self.budget}-{self.measure}"


def experiment_jobs(cfg: ExperimentConfig, n_nodes: int) -> list[Job]:
    """Every (strategy, budget, measure) run needed by the report, deduplicated, in a fixed order.

    Families: the strategy table at the default budget, the budget sweep,
    the centrality-measure table for BETA, and the explainer ablation
    (BETA vs centrality-only selection).
    """
    a = cfg.attack
    jobs: list[Job] = []

    def add(tag, b, m=a.measure):
        job = Job(tag, n_nodes - 1 if tag == "Unbudgeted" else b, m)
        if job not in jobs:
            jobs.append(job)

    for tag in a.strategies:
        add(tag, a.budget)
    for tag in a.sweep_strategies:
        for b in a.budgets:
            add(tag, b)
    for m in a.measures:
        add("BETA", a.budget, m)
    for b in a.ablation_budgets:
        add("BETA", b)
        add("Centrality-only", b)
    return jobs


def job_spec(cfg: ExperimentConfig, seed: int, job: Job) -> AttackSpec:
    return attack_spec(cfg, seed, budget=job.budget, measure=job.measure)


def outcome_row(job: Job | None, decisions: np.ndarray, scores: np.ndarray, labels: np.ndarray, seed: int,
                dataset: str, threshold: float) -> dict:
    row = {"strategy": "No attack" if job is None else job.strategy, "dataset": dataset,
           "budget": 0 if job is None else job.budget, "measure": "" if job is None else job.measure,
           "seed": seed, "threshold": threshold}
    row.update(metric_row(decisions, scores, labels))
    return row


def dataset_name(cfg: ExperimentConfig) -> str:
    src = cfg.dataset.source
    return "synthetic" if src == "synthetic" else src.replace("\\", "/").rsplit("/", 1)[-1].rsplit(".", 1)[0]
