"""Experiment runner: per-seed pipelines, MSE/Bias/SD aggregation and reports.

Each seed gets its own :class:`numpy.random.SeedSequence`, spawned into
independent streams for the world (graph, contexts, environment), the logged
data, the ground-truth rollouts and each classifier. Results therefore do not
depend on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import env as E
from .config import ExperimentConfig, dump_config
from .errors import NetopeError, ParameterError
from .estimators import (
    CSV_COLUMNS,
    EstimateResult,
    WeightVector,
    bipw_weights,
    classifier_weights,
    dm_estimate,
    dr_estimate,
    fit_reward_model,
    intipw_estimate,
    ipw_estimate,
    oracle_joint_weights,
    sgipw_shrink,
    snipw_estimate,
    vanilla_weights,
)
from .graph import NetworkGraph, augment, generate_erdos_renyi, generate_watts_strogatz
from .ingest import pca_rank_order, read_prepared

logger = logging.getLogger(__name__)

MAX_ENUMERATED_LOGS = 2 ** 12
LOW_PROPENSITY_WARNING = 1e-3
_STREAMS = ("world", "log", "truth", "eval_actions", "intipw", "bipw")


@dataclass(frozen=True)
class World:
    graph: NetworkGraph
    contexts: np.ndarray
    env: E.EnvParams


@dataclass
class SeedOutcome:
    seed: int
    true_value: float
    results: dict = field(default_factory=dict)  # estimator -> EstimateResult
    failures: dict = field(default_factory=dict)  # estimator -> message
    min_behavior_propensity: float = float("nan")


@dataclass(frozen=True)
class AggregateRow:
    estimator: str
    config: str  # config label or fingerprint
    mse: float
    bias: float
    sd: float
    n_seeds: int


# --------------------------------------------------------------------------
# world and data


def _streams(config: ExperimentConfig, seed: int) -> dict[str, np.random.Generator]:
    seqs = dict(zip(_STREAMS, np.random.SeedSequence(seed).spawn(len(_STREAMS))))
    if config.fixed_world:
        seqs["world"] = np.random.SeedSequence(config.world_seed).spawn(len(_STREAMS))[0]
    return {k: np.random.default_rng(v) for k, v in seqs.items()}


def _ws_degree(neighbors: float) -> int:
    """Nearest even ring degree (halves round up), at least 2."""
    return max(2, int(math.floor(neighbors / 2.0 + 0.5)) * 2)


def build_world(config: ExperimentConfig, rng: np.random.Generator) -> World:
    """Draw (or load) the graph and contexts, then the environment coefficients."""
    if config.graph == "file":
        contexts, graph, _ = read_prepared(config.dataset)
    else:
        n = config.n
        contexts = E.sample_contexts(n, config.p_dim, rng)
        if config.graph == "er":
            graph = generate_erdos_renyi(n, min(1.0, config.neighbors / n), rng)
        else:
            order = pca_rank_order(contexts)
            graph = generate_watts_strogatz(n, _ws_degree(config.neighbors), config.rewire_p, rng, ordering=order)
    env = E.make_env(rng, contexts.shape[1], config.n_actions, config.b, config.c, config.noise_sd)
    return World(graph, contexts, env)


# --------------------------------------------------------------------------
# estimators


def _run_estimators(
    config: ExperimentConfig,
    world: World,
    log: E.LoggedDataset,
    p0: np.ndarray,
    pe: np.ndarray,
    rngs: dict,
    seed: int,
) -> tuple[dict, dict]:
    """Run every configured estimator on one log; failures are caught per estimator."""
    results, failures = {}, {}
    cache: dict = {}
    D = config.n_actions

    def vanilla():
        if "vanilla" not in cache:
            cache["vanilla"] = vanilla_weights(p0, pe, log.actions)
        return cache["vanilla"]

    def reward_model():
        if "rm" not in cache:
            cache["rm"] = fit_reward_model(log, config.reward_reg, D)
        return cache["rm"]

    def oracle():
        if "oracle" not in cache:
            cache["oracle"] = oracle_joint_weights(world.graph, p0, pe, log.actions, config.oracle_w_max)
        return cache["oracle"]

    def eval_actions():
        if "a1" not in cache:
            cache["a1"] = E.sample_actions(pe, rngs["eval_actions"])
        return cache["a1"]

    def classifier(graph_aware: bool) -> WeightVector:
        cfg = config.classifier_config(seed)
        if graph_aware:
            return classifier_weights(
                log.contexts, log.actions, eval_actions(), D, cfg,
                augment(world.graph, config.clf_normalization), rngs["intipw"], pe,
            )[0]
        return bipw_weights(log.contexts, log.actions, eval_actions(), D, cfg, rngs["bipw"], pe)

    lam = config.sgipw_lambda if config.sgipw_lambda is not None else 1.0 / math.sqrt(log.n)
    table = {
        "dm": lambda: dm_estimate(log, reward_model(), pe),
        "ipw": lambda: ipw_estimate(vanilla(), log.rewards),
        "snipw": lambda: snipw_estimate(vanilla(), log.rewards),
        "dr": lambda: dr_estimate(log, reward_model(), vanilla(), pe),
        "sgipw": lambda: ipw_estimate(sgipw_shrink(vanilla(), lam), log.rewards, name="sgipw"),
        "bipw": lambda: ipw_estimate(classifier(False), log.rewards, name="bipw"),
        "oracle_ipw": lambda: ipw_estimate(oracle(), log.rewards, name="oracle_ipw"),
        "oracle_snipw": lambda: snipw_estimate(oracle(), log.rewards, name="oracle_snipw"),
        "intipw": lambda: intipw_estimate(classifier(True), log.rewards),
    }
    for name in config.estimators:
        try:
            res = table[name]()
            if not math.isfinite(res.value):
                raise FloatingPointError(f"non-finite estimate {res.value}")
            results[name] = res
        except (NetopeError, ArithmeticError, ValueError) as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"
            logger.warning("seed %d: %s failed: %s", seed, name, exc)
    return results, failures


def _enumerated_results(config, world, p0, pe, rngs, seed) -> tuple[dict, dict]:
    """Exact expectation of each estimate over every behavior assignment (noise-free)."""
    n, D = p0.shape
    if D ** n > MAX_ENUMERATED_LOGS:
        raise ParameterError(f"log_mode=enumerate needs D**n <= {MAX_ENUMERATED_LOGS}, got {D}**{n}")
    kernel = E.RewardKernel(world.env, world.graph, world.contexts)
    sums: dict = {}
    failures: dict = {}
    rows = np.arange(n)
    for A in E._iter_assignments(n, D):
        for a in A:
            prob = float(np.prod(p0[rows, a]))
            if prob == 0.0:
                continue
            log = E.LoggedDataset(world.graph, world.contexts, a, kernel.noise_free(a))
            res, fail = _run_estimators(config, world, log, p0, pe, rngs, seed)
            failures.update(fail)
            for k, r in res.items():
                sums[k] = sums.get(k, 0.0) + prob * r.value
    results = {k: EstimateResult(k, v, provenance="enumerated") for k, v in sums.items() if k not in failures}
    return results, failures


def run_seed(config: ExperimentConfig, seed: int) -> SeedOutcome:
    """Full pipeline for one seed: world, log, ground truth, estimators."""
    rngs = _streams(config, seed)
    world = build_world(config, rngs["world"])
    policy = E.PolicyParams(config.beta_temp, config.gamma)
    p0 = E.behavior_propensity_matrix(world.env, policy, world.contexts)
    pe = E.evaluation_propensity_matrix(world.env, policy, world.contexts)
    truth = E.true_policy_value(world.env, policy, world.graph, world.contexts, config.rollouts, rngs["truth"])
    min_p0 = float(p0.min())
    if min_p0 < LOW_PROPENSITY_WARNING:
        logger.warning("seed %d: minimum behavior propensity %.3g; weights may be unstable", seed, min_p0)
    if config.log_mode == "enumerate":
        results, failures = _enumerated_results(config, world, p0, pe, rngs, seed)
        return SeedOutcome(seed, truth, results, failures, min_p0)
    log = E.generate_log(world.env, policy, world.graph, rngs["log"], contexts=world.contexts)
    results, failures = _run_estimators(config, world, log, p0, pe, rngs, seed)
    return SeedOutcome(seed, truth, results, failures, min_p0)


# --------------------------------------------------------------------------
# aggregation


def aggregate(
    estimates: Sequence[float],
    true_value: Union[float, Sequence[float]],
    estimator: str = "",
    config: str = "",
) -> AggregateRow:
    """MSE, |bias| and population SD of the per-seed errors ``est - V``.

    ``true_value`` may be a scalar or one value per seed. With a scalar this
    is the usual ``mse = mean((est - V)^2)``, ``bias = |mean(est) - V|`` and
    ``sd = std(est)``, and ``mse = bias^2 + sd^2`` holds exactly.
    """
    est = np.asarray(estimates, dtype=float)
    if est.ndim != 1 or est.shape[0] < 2:
        raise ParameterError(f"aggregate needs at least 2 seeds, got {est.size}")
    err = est - np.broadcast_to(np.asarray(true_value, dtype=float), est.shape)
    mean_err = float(err.mean())
    return AggregateRow(
        estimator=estimator,
        config=config,
        mse=float(np.mean(err * err)),
        bias=abs(mean_err),
        sd=float(np.sqrt(np.mean((err - mean_err) ** 2))),
        n_seeds=int(est.shape[0]),
    )


def aggregate_outcomes(config: ExperimentConfig, outcomes: Sequence[SeedOutcome]) -> list[AggregateRow]:
    rows = []
    for name in config.estimators:
        ok = [o for o in outcomes if name in o.results]
        est = [o.results[name].value for o in ok]
        truth = [o.true_value for o in ok]
        try:
            rows.append(aggregate(est, truth, name, config.name))
        except ParameterError:
            nan = float("nan")
            rows.append(AggregateRow(name, config.name, nan, nan, nan, len(ok)))
    return rows


# --------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    outcomes: list


def _run_seed_args(args):
    return run_seed(*args)


def run_experiment(config: ExperimentConfig, threads: int = 1, out_dir: Optional[Union[str, Path]] = None) -> ExperimentResult:
    """Run all seeds of one config and aggregate per estimator.

    When ``out_dir`` is given, writes ``config.yaml``, per-seed ``estimates.csv``,
    ``failures.csv`` and ``truth.csv`` there.
    """
    jobs = [(config, s) for s in config.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(_run_seed_args, jobs))
    else:
        outcomes = [run_seed(*j) for j in jobs]
    result = ExperimentResult(config, aggregate_outcomes(config, outcomes), outcomes)
    if out_dir is not None:
        write_seed_outputs(result, out_dir)
    return result


def write_seed_outputs(result: ExperimentResult, out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(result.config))
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for o in result.outcomes:
            for name in result.config.estimators:
                if name in o.results:
                    r = o.results[name]
                    w.writerow([name, o.seed, repr(r.value), repr(r.ess), repr(r.max_weight), repr(r.mean_weight), r.clips])
    with open(out / "truth.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("seed", "true_value", "min_behavior_propensity"))
        for o in result.outcomes:
            w.writerow([o.seed, repr(o.true_value), repr(o.min_behavior_propensity)])
    with open(out / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("estimator", "seed", "error"))
        for o in result.outcomes:
            for name, msg in sorted(o.failures.items()):
                w.writerow([name, o.seed, msg])
    emit_report(result.rows, "json", out / "aggregate.json")


def run_sweep(
    base: ExperimentConfig,
    points: Sequence[tuple[str, dict]],
    threads: int = 1,
    out_dir: Optional[Union[str, Path]] = None,
) -> list[ExperimentResult]:
    """Run each ``(label, overrides)`` point; per-point outputs go to ``out_dir/label``."""
    results = []
    for label, overrides in points:
        cfg = base.replace(label=label, **overrides)
        sub = None if out_dir is None else Path(out_dir) / label
        logger.info("running %s (%d seeds)", label, len(cfg.seeds))
        results.append(run_experiment(cfg, threads, sub))
    return results


# --------------------------------------------------------------------------
# reports

REPORT_FORMATS = ("csv", "json", "md")
_METRICS = ("mse", "bias", "sd")


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6g}"


def _pivot(rows: Sequence[AggregateRow]) -> tuple[list[str], list[str], dict]:
    configs, estimators, cells = [], [], {}
    for r in rows:
        if r.config not in configs:
            configs.append(r.config)
        if r.estimator not in estimators:
            estimators.append(r.estimator)
        cells[(r.estimator, r.config)] = r
    return configs, estimators, cells


def render_report(rows: Sequence[AggregateRow], fmt: str) -> str:
    """Render rows as a wide table: estimator, then (mse, bias, sd) per config.

    Configs and estimators keep their first-appearance order, so output is
    byte-identical for identical input.
    """
    if fmt in ("markdown", "markdown-table"):
        fmt = "md"
    if fmt not in REPORT_FORMATS:
        raise ParameterError(f"unknown report format {fmt!r}; choose from {REPORT_FORMATS}")
    if fmt == "json":
        payload = [
            {"estimator": r.estimator, "config": r.config, "mse": r.mse, "bias": r.bias, "sd": r.sd, "n_seeds": r.n_seeds}
            for r in rows
        ]
        return json.dumps(payload, indent=1, allow_nan=True) + "\n"
    configs, estimators, cells = _pivot(rows)
    header = ["estimator"] + [f"{c}:{m}" for c in configs for m in _METRICS]
    body = []
    for e in estimators:
        line = [e]
        for c in configs:
            r = cells.get((e, c))
            line += [_fmt(getattr(r, m)) if r else "" for m in _METRICS]
        body.append(line)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(body)
        return buf.getvalue()
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(b) + " |" for b in body]
    return "\n".join(lines) + "\n"


def emit_report(rows: Sequence[AggregateRow], fmt: str, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(render_report(rows, fmt))
    return path


def read_aggregate_json(path: Union[str, Path]) -> list[AggregateRow]:
    data = json.loads(Path(path).read_text())
    return [AggregateRow(d["estimator"], d["config"], d["mse"], d["bias"], d["sd"], d["n_seeds"]) for d in data]
