"""Command line runner: one subcommand per pipeline stage, JSON config, cached stage outputs.

Stage outputs live in ``<stage-cache>/<stage>-<hash>/seed-<k>/`` where the
hash covers every config section the stage depends on, so a changed config
never picks up stale artifacts. Exit codes: 0 ok, 2 config error, 3 missing
upstream artifact, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import detector as det
from . import pipeline as P
from .artifacts import atomic_write, config_hash, read_arrays, read_json, write_arrays, write_json
from .config import ExperimentConfig, load_config
from .data import TimeSeriesDataset, load_dataset, save_dataset
from .errors import BetaError, ConfigError, DependencyError, NumericalError
from .explainer import extract_candidates, load_explainer, save_explainer, train_explainer
from .metrics import RESULT_FIELDS, results_csv
from .surrogate import QueryLog, SurrogateModel, Victim, split_log

logger = logging.getLogger("beta_attack")

STAGES = ("generate", "train-victim", "train-surrogate", "explain", "attack", "evaluate")
REPORT_FIELDS = RESULT_FIELDS + ("measure", "config_hash")
DONE = "complete.json"


def stage_key(cfg: ExperimentConfig, stage: str) -> dict:
    """Config content a stage depends on (its own sections plus all upstream ones)."""
    d = cfg.to_dict()
    key = {"dataset": d["dataset"]}
    if stage == "generate":
        return key
    key["model"] = d["model"]
    if stage == "train-victim":
        return key
    key["surrogate"] = d["surrogate"]
    key["targets"] = d["attack"]["targets"]
    if stage == "train-surrogate":
        return key
    key["explainer"] = d["explainer"]
    if stage == "explain":
        return key
    key["attack"] = d["attack"]
    return key


class Workspace:
    def __init__(self, cfg: ExperimentConfig, cache: Path, out: Path, force: bool = False):
        self.cfg, self.cache, self.out, self.force = cfg, cache, out, force
        self.full_hash = config_hash(cfg.to_dict())

    def stage_hash(self, stage: str) -> str:
        return config_hash(stage_key(self.cfg, stage))

    def dir(self, stage: str, seed: int) -> Path:
        return self.cache / f"{stage}-{self.stage_hash(stage)}" / f"seed-{seed}"

    def header(self, stage: str, seed: int) -> dict:
        return {"stage": stage, "seed": seed, "config_hash": self.stage_hash(stage)}

    def require(self, stage: str, seed: int, name: str) -> Path:
        path = self.dir(stage, seed) / name
        if not path.exists():
            what = "incomplete stage" if name == DONE else "missing upstream artifact"
            raise DependencyError(f"{what} {path} (run '{stage}' first)")
        return path

    def done(self, stage: str, seed: int) -> bool:
        return not self.force and (self.dir(stage, seed) / DONE).exists()

    def mark(self, stage: str, seed: int, files: list[str]) -> None:
        write_json(self.dir(stage, seed) / DONE, {**self.header(stage, seed), "files": sorted(files)})

    # loaders ---------------------------------------------------------------

    def dataset(self, seed: int) -> TimeSeriesDataset:
        path = self.require("generate", seed, "dataset.json")
        self.require("generate", seed, DONE)
        return load_dataset(path)[0]

    def victim_model(self, seed: int) -> det.GdnModel:
        path = self.require("train-victim", seed, "victim.json")
        self.require("train-victim", seed, DONE)
        return det.load_checkpoint(path)[0]

    def surrogate(self, seed: int, ds: TimeSeriesDataset) -> P.SurrogateBundle:
        self.require("train-surrogate", seed, "forecaster.json")
        self.require("train-surrogate", seed, DONE)
        d = self.dir("train-surrogate", seed)
        model = det.load_checkpoint(d / "forecaster")[0]
        meta = read_json(d / "surrogate.json")
        sur = SurrogateModel(model, {int(k): v for k, v in meta["thresholds"].items()},
                             {int(k): v for k, v in meta["agreement"].items()})
        logs = {u: QueryLog.from_jsonl(d / f"queries-u{u}.jsonl", ds) for u in meta["targets"]}
        held = {int(k): v for k, v in meta["holdout_agreement"].items()}
        return P.SurrogateBundle(sur, logs, held)

    def context(self, seed: int):
        ds = self.dataset(seed)
        vm = self.victim_model(seed)
        bundle = self.surrogate(seed, ds)
        ctx = P.attack_context(self.cfg, ds, bundle, vm.adjacency, Victim(vm), seed)
        self.require("explain", seed, DONE)
        d = self.dir("explain", seed)
        for u in bundle.logs:
            path = d / f"explainer-u{u}.json"
            if path.exists():
                ctx._explainers[u] = load_explainer(path)
        return ds, vm, bundle, ctx


# ----------------------------------------------------------------------------
# stages


def cmd_generate(ws: Workspace, seed: int) -> None:
    ds = P.build_dataset(ws.cfg, seed)
    save_dataset(ds, ws.dir("generate", seed) / "dataset", ws.header("generate", seed))
    ws.mark("generate", seed, ["dataset.json", "dataset.bin"])


def cmd_train_victim(ws: Workspace, seed: int) -> None:
    ds = ws.dataset(seed)
    vm = P.train_victim(ws.cfg, ds, seed)
    det.save_checkpoint(vm, ws.dir("train-victim", seed) / "victim", ws.header("train-victim", seed))
    ws.mark("train-victim", seed, ["victim.json", "victim.bin"])


def cmd_train_surrogate(ws: Workspace, seed: int) -> None:
    ds = ws.dataset(seed)
    vm = ws.victim_model(seed)
    targets = P.targets_of(ws.cfg, ds.n_sensors)
    bundle = P.build_surrogate(ws.cfg, ds, Victim(vm), vm.adjacency, seed, targets)
    d = ws.dir("train-surrogate", seed)
    header = ws.header("train-surrogate", seed)
    sur = bundle.surrogate
    det.save_checkpoint(sur.model, d / "forecaster", header)
    files = ["forecaster.json", "forecaster.bin", "surrogate.json"]
    for u, log in bundle.logs.items():
        log.to_jsonl(d / f"queries-u{u}.jsonl", header)
        files.append(f"queries-u{u}.jsonl")
    write_json(d / "surrogate.json", {
        **header, "targets": targets,
        "thresholds": {str(u): sur.thresholds[u] for u in targets},
        "agreement": {str(u): sur.agreement[u] for u in targets},
        "holdout_agreement": {str(u): bundle.holdout_agreement[u] for u in targets},
        "mean_holdout_agreement": float(np.mean(list(bundle.holdout_agreement.values())))})
    ws.mark("train-surrogate", seed, files)


def ctx_segments(bundle: P.SurrogateBundle) -> tuple[np.ndarray, np.ndarray]:
    # every target's log covers the same windows; only the labels differ
    first = next(iter(bundle.logs.values()))
    return first.segments, first.observed


def cmd_explain(ws: Workspace, seed: int) -> None:
    ds = ws.dataset(seed)
    bundle = ws.surrogate(seed, ds)
    ecfg = P.explainer_config(ws.cfg, seed)
    d = ws.dir("explain", seed)
    header = ws.header("explain", seed)
    E = P.attack_spec(ws.cfg, seed).explainer_edges
    files = []
    segs, obs = ctx_segments(bundle)
    for u, log in bundle.logs.items():
        try:
            net = train_explainer(bundle.surrogate, segs, obs, u, ecfg)
        except BetaError as exc:
            write_json(d / f"explanation-u{u}.json", {**header, "target": u, "error": str(exc)})
            files.append(f"explanation-u{u}.json")
            continue
        save_explainer(net, d / f"explainer-u{u}", header)
        hold = split_log(log, ws.cfg.surrogate.holdout, seed + u)[1]
        res = extract_candidates(net, E, bundle.surrogate, (hold.segments, hold.observed))
        write_json(d / f"explanation-u{u}.json", {**header, "edges_kept": E, **res.to_dict()})
        files += [f"explainer-u{u}.json", f"explainer-u{u}.bin", f"explanation-u{u}.json"]
    ws.mark("explain", seed, files)


def cmd_attack(ws: Workspace, seed: int) -> None:
    ds, vm, bundle, ctx = ws.context(seed)
    X, Y, L = P.eval_windows(ws.cfg, ds)
    targets = P.targets_of(ws.cfg, ds.n_sensors)
    d = ws.dir("attack", seed)
    header = ws.header("attack", seed)
    cal = vm.calibration
    clean = det.score(vm, cal, X, Y)[:, targets]
    write_arrays(d / "clean", {"scores": clean, "decisions": clean > cal.threshold, "labels": L[:, targets]},
                 {**header, "targets": targets})
    files = ["clean.json", "clean.bin"]
    for job in P.experiment_jobs(ws.cfg, ds.n_sensors):
        spec = P.job_spec(ws.cfg, seed, job)
        out = P.run_job(ctx, vm, X, Y, L, targets, job.strategy, spec)
        write_arrays(d / job.key, {"scores": out.scores, "decisions": out.decisions, "success": out.success},
                     {**header, "strategy": job.strategy, "budget": job.budget, "measure": job.measure,
                      "spec": dataclasses.asdict(spec), "targets": targets, "linf": out.linf, "max_rows": out.max_rows,
                      "influencers": {str(u): v for u, v in out.influencers.items()}})
        files += [f"{job.key}.json", f"{job.key}.bin"]
        logger.info("seed %d %s done", seed, job.key)
    ws.mark("attack", seed, files)


def cmd_evaluate(ws: Workspace, seed: int) -> None:
    self_dir = ws.dir("evaluate", seed)
    ws.require("attack", seed, DONE)
    ds_name = P.dataset_name(ws.cfg)
    threshold = read_json(ws.require("train-victim", seed, "victim.json"))["header"]["threshold"]
    clean, _ = read_arrays(ws.require("attack", seed, "clean.json"))
    labels = clean["labels"]
    rows = [P.outcome_row(None, clean["decisions"], clean["scores"], labels, seed, ds_name, threshold)]
    sensors = read_json(ws.require("generate", seed, "dataset.json"))["header"]["dataset"]["sensor_ids"]
    for job in P.experiment_jobs(ws.cfg, len(sensors)):
        arrs, _ = read_arrays(ws.require("attack", seed, f"{job.key}.json"))
        rows.append(P.outcome_row(job, arrs["decisions"], arrs["scores"], labels, seed, ds_name, threshold))
    sur = read_json(ws.require("train-surrogate", seed, "surrogate.json"))
    write_json(self_dir / "metrics.json", {**ws.header("evaluate", seed), "rows": _finite(rows),
                                           "surrogate_agreement": sur["mean_holdout_agreement"]})
    ws.mark("evaluate", seed, ["metrics.json"])


def _finite(rows: list[dict]) -> list[dict]:
    # JSON has no NaN; undefined metrics are written as null
    return [{k: (None if isinstance(v, float) and not np.isfinite(v) else v) for k, v in r.items()} for r in rows]


def _mean(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_report(ws: Workspace, seeds: list[int]) -> None:
    cfg = ws.cfg
    per_seed = {s: read_json(ws.require("evaluate", s, "metrics.json")) for s in seeds}
    rows = [dict(r, config_hash=ws.full_hash) for s in seeds for r in per_seed[s]["rows"]]
    atomic_write(ws.out / "results.csv", results_csv(rows, REPORT_FIELDS))

    def mean_of(strategy, budget=None, measure=None, metric="fta"):
        sel = [r[metric] for r in rows if r["strategy"] == strategy
               and (budget is None or r["budget"] == budget) and (measure is None or r["measure"] == measure)]
        return _mean(sel)

    a = cfg.attack
    strategies = ["No attack"] + list(a.strategies)
    table = {t: {m: mean_of(t, None if t in ("No attack", "Unbudgeted") else a.budget,
                            None if t == "No attack" else a.measure, m) for m in ("f1", "auc_pr", "fta")}
             for t in strategies}
    sweep = {t: [mean_of(t, b, a.measure) for b in a.budgets] for t in a.sweep_strategies}
    plot = {
        "config_hash": ws.full_hash,
        "seeds": list(seeds),
        "dataset": P.dataset_name(cfg),
        "metric_table": table,
        "fta_vs_budget": {"budgets": list(a.budgets), "series": sweep,
                          "unbudgeted": mean_of("Unbudgeted", metric="fta")},
        "centrality_table": {m: mean_of("BETA", a.budget, m) for m in a.measures},
        "explainer_ablation": {"budgets": list(a.ablation_budgets),
                               "gaf_plus_centrality": [mean_of("BETA", b, a.measure) for b in a.ablation_budgets],
                               "centrality_only": [mean_of("Centrality-only", b, a.measure)
                                                   for b in a.ablation_budgets]},
        "surrogate_agreement": _mean(per_seed[s]["surrogate_agreement"] for s in seeds),
    }
    write_json(ws.out / "plot_data.json", plot)


COMMANDS = {
    "generate": cmd_generate,
    "train-victim": cmd_train_victim,
    "train-surrogate": cmd_train_surrogate,
    "explain": cmd_explain,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
}


# ----------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    common.add_argument("--seed", type=int, default=None, help="run a single seed instead of run.seeds")
    common.add_argument("--out", type=Path, default=None, help="output directory (default: run.output_dir)")
    common.add_argument("--stage-cache", type=Path, default=None, help="stage artifact directory (default: OUT/cache)")
    common.add_argument("--force", action="store_true", help="recompute stages that are already complete")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="beta-attack", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("report", "run"):
        sub.add_parser(name, parents=[common])
    return parser


def _run_stage(ws: Workspace, stage: str, seed: int) -> None:
    if ws.done(stage, seed):
        logger.info("%s seed %d: up to date (%s)", stage, seed, ws.dir(stage, seed))
        return
    COMMANDS[stage](ws, seed)
    logger.info("%s seed %d: wrote %s", stage, seed, ws.dir(stage, seed))


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        out = args.out if args.out is not None else Path(cfg.run.output_dir)
        cache = args.stage_cache if args.stage_cache is not None else out / "cache"
        ws = Workspace(cfg, cache, out, args.force)
        seeds = [args.seed] if args.seed is not None else list(cfg.run.seeds)
        if args.command == "report":
            cmd_report(ws, seeds)
        elif args.command == "run":
            for seed in seeds:
                for stage in STAGES:
                    _run_stage(ws, stage, seed)
            cmd_report(ws, seeds)
        else:
            for seed in seeds:
                _run_stage(ws, args.command, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except BetaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
