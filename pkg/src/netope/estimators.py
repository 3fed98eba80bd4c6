"""Off-policy estimators for networked bandit logs.

All estimators return an :class:`EstimateResult`. Weight-based estimators
take a :class:`WeightVector` so the origin of the weights travels with them
into reports.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np

from .classifier import ClassifierConfig, ClassifierModel, extract_weights, train
from .env import LoggedDataset
from .errors import ParameterError, SupportError
from .graph import AugmentedGraph, NetworkGraph

MIN_PROPENSITY = 1e-12
ORACLE_W_MAX = 1e4

PROVENANCES = ("true-propensity", "classifier-graph", "classifier-flat", "oracle-joint", "shrunk", "constant")


@dataclass(frozen=True)
class WeightVector:
    w: np.ndarray
    provenance: str
    clips: int = 0

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 1:
            raise ParameterError("weights must be a vector")
        if not np.all(np.isfinite(w)) or np.any(w < 0):
            raise ParameterError("weights must be finite and non-negative")
        if self.provenance not in PROVENANCES:
            raise ParameterError(f"unknown provenance {self.provenance!r}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def __len__(self):
        return self.w.shape[0]


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    value: float
    ess: float = float("nan")
    max_weight: float = float("nan")
    mean_weight: float = float("nan")
    clips: int = 0
    provenance: str = ""


def _result(name: str, value: float, weights: Optional[WeightVector]) -> EstimateResult:
    if weights is None:
        return EstimateResult(name, float(value))
    w = weights.w
    sq = float(np.sum(w * w))
    ess = float(np.sum(w) ** 2 / sq) if sq > 0 else float("nan")
    return EstimateResult(
        name,
        float(value),
        ess=ess,
        max_weight=float(w.max()),
        mean_weight=float(w.mean()),
        clips=int(weights.clips),
        provenance=weights.provenance,
    )


# --------------------------------------------------------------------------
# reward model


@dataclass(frozen=True)
class RewardModel:
    """Per-action ridge regression ``r ~ intercept + x'coef`` (intercept unpenalized)."""

    coef: np.ndarray  # (D, p)
    intercept: np.ndarray  # (D,)
    fitted: np.ndarray  # (D,) bool, False means global-mean fallback
    global_mean: float
    reg: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Predicted reward for every row of ``X`` and every action, shape (n, D)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        pred = X @ self.coef.T + self.intercept
        pred[:, ~self.fitted] = self.global_mean
        return pred


def fit_reward_model(dataset: LoggedDataset, reg: float = 1.0, n_actions: Optional[int] = None) -> RewardModel:
    X, a, r = dataset.contexts, dataset.actions, dataset.rewards
    D = int(n_actions if n_actions is not None else a.max() + 1)
    n, p = X.shape
    coef = np.zeros((D, p))
    intercept = np.zeros(D)
    fitted = np.zeros(D, dtype=bool)
    gm = float(r.mean())
    for k in range(D):
        mask = a == k
        if not mask.any():
            continue
        Xk, rk = X[mask], r[mask]
        mu_x, mu_r = Xk.mean(axis=0), rk.mean()
        Xc, rc = Xk - mu_x, rk - mu_r
        if reg > 0:
            # ridge via augmented least squares keeps conditioning of lstsq
            Xa = np.vstack([Xc, np.sqrt(reg) * np.eye(p)])
            ra = np.concatenate([rc, np.zeros(p)])
        else:
            Xa, ra = Xc, rc
        beta = np.linalg.lstsq(Xa, ra, rcond=None)[0]
        coef[k] = beta
        intercept[k] = mu_r - mu_x @ beta
        fitted[k] = True
    return RewardModel(coef, intercept, fitted, gm, reg)


# --------------------------------------------------------------------------
# weights


def _check_props(prop: np.ndarray, n: int, name: str) -> np.ndarray:
    prop = np.asarray(prop, dtype=float)
    if prop.ndim != 2 or prop.shape[0] != n:
        raise ParameterError(f"{name} must have shape (n, D) with n={n}")
    return prop


def _logged_behavior(behavior_prop: np.ndarray, actions: np.ndarray) -> np.ndarray:
    p0 = behavior_prop[np.arange(actions.shape[0]), actions]
    bad = np.flatnonzero(p0 < MIN_PROPENSITY)
    if bad.size:
        raise SupportError(
            f"behavior propensity {p0[bad[0]]:.3g} < {MIN_PROPENSITY} for unit {bad[0]} "
            f"({bad.size} unit(s) violate positivity)"
        )
    return p0


def vanilla_weights(behavior_prop: np.ndarray, eval_prop: np.ndarray, actions: np.ndarray) -> WeightVector:
    """``pi(a_i | x_i) / pi_0(a_i | x_i)`` at each logged action."""
    actions = np.asarray(actions, dtype=np.int64)
    n = actions.shape[0]
    behavior_prop = _check_props(behavior_prop, n, "behavior_prop")
    eval_prop = _check_props(eval_prop, n, "eval_prop")
    p0 = _logged_behavior(behavior_prop, actions)
    return WeightVector(eval_prop[np.arange(n), actions] / p0, "true-propensity")


def oracle_joint_weights(
    graph: NetworkGraph,
    behavior_prop: np.ndarray,
    eval_prop: np.ndarray,
    actions: np.ndarray,
    w_max: float = ORACLE_W_MAX,
) -> WeightVector:
    """Product of per-unit propensity ratios over each unit and its neighbors.

    Both policies act independently per unit, so the joint ratio over the
    closed neighborhood factorizes. Weights above ``w_max`` are clipped and
    counted.
    """
    per_unit = vanilla_weights(behavior_prop, eval_prop, actions).w
    n = graph.n
    with np.errstate(divide="ignore"):
        logw = np.log(per_unit)
    zero = per_unit == 0
    # sum of logs over neighbors; a zero anywhere in the neighborhood zeroes the product
    adj = graph.adjacency_sparse()
    finite_log = np.where(zero, 0.0, logw)
    total = finite_log + adj @ finite_log
    has_zero = zero | ((adj @ zero.astype(float)) > 0)
    w = np.where(has_zero, 0.0, np.exp(np.minimum(total, 700.0)))
    clipped = w > w_max
    w = np.where(clipped, w_max, w)
    return WeightVector(w, "oracle-joint", clips=int(clipped.sum()))


def sgipw_shrink(weights: WeightVector, lambda_s: float) -> WeightVector:
    """``w / (1 - lambda + lambda * w)``; identity at ``lambda = 0``, bounded by ``1 / lambda``."""
    if not 0.0 <= lambda_s <= 1.0:
        raise ParameterError(f"lambda_s must lie in [0, 1], got {lambda_s}")
    w = weights.w
    if lambda_s == 0:
        return WeightVector(w.copy(), "shrunk", weights.clips)
    denom = 1.0 - lambda_s + lambda_s * w
    shrunk = np.divide(w, denom, out=np.zeros_like(w), where=denom > 0)
    return WeightVector(shrunk, "shrunk", weights.clips)


def classifier_weights(
    contexts: np.ndarray,
    logged_actions: np.ndarray,
    eval_actions: np.ndarray,
    n_actions: int,
    config: ClassifierConfig = ClassifierConfig(),
    graph: Optional[AugmentedGraph] = None,
    rng: Optional[np.random.Generator] = None,
    eval_prop: Optional[np.ndarray] = None,
) -> tuple[WeightVector, ClassifierModel]:
    """Train the (graph or flat) classifier and return its odds as weights.

    ``rng`` and ``eval_prop`` are only needed when the config resamples the
    evaluation actions every epoch.
    """
    model = ClassifierModel(contexts.shape[1], n_actions, config)
    train(model, graph, contexts, logged_actions, eval_actions, rng=rng, eval_probs=eval_prop)
    w = extract_weights(model, graph, contexts, logged_actions)
    return WeightVector(w, "classifier-graph" if graph is not None else "classifier-flat"), model


def bipw_weights(
    contexts: np.ndarray,
    logged_actions: np.ndarray,
    eval_actions: np.ndarray,
    n_actions: int,
    config: ClassifierConfig = ClassifierConfig(),
    rng: Optional[np.random.Generator] = None,
    eval_prop: Optional[np.ndarray] = None,
) -> WeightVector:
    """Per-unit classifier weights that ignore the graph entirely."""
    return classifier_weights(contexts, logged_actions, eval_actions, n_actions, config, None, rng, eval_prop)[0]


# --------------------------------------------------------------------------
# estimates


def _check_pair(weights: WeightVector, rewards: np.ndarray) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape != weights.w.shape:
        raise ParameterError("weights and rewards must have the same length")
    return rewards


def ipw_estimate(weights: WeightVector, rewards: np.ndarray, name: str = "ipw") -> EstimateResult:
    """``mean(w * r)``."""
    rewards = _check_pair(weights, rewards)
    return _result(name, np.mean(weights.w * rewards), weights)


def snipw_estimate(weights: WeightVector, rewards: np.ndarray, name: str = "snipw") -> EstimateResult:
    """``sum(w * r) / sum(w)``; 0.0 when every weight is zero."""
    rewards = _check_pair(weights, rewards)
    total = np.sum(weights.w)
    value = np.sum(weights.w * rewards) / total if total > 0 else 0.0
    return _result(name, value, weights)


def intipw_estimate(weights: WeightVector, rewards: np.ndarray) -> EstimateResult:
    return snipw_estimate(weights, rewards, name="intipw")


def dm_estimate(dataset: LoggedDataset, model: RewardModel, eval_prop: np.ndarray) -> EstimateResult:
    """``(1/n) sum_i sum_a pi(a | x_i) rhat(x_i, a)``."""
    pred = model.predict(dataset.contexts)
    eval_prop = np.asarray(eval_prop, dtype=float)
    if eval_prop.shape != pred.shape:
        raise ParameterError(f"eval_prop shape {eval_prop.shape} != predictions {pred.shape}")
    return EstimateResult("dm", float(np.mean(np.sum(eval_prop * pred, axis=1))))


def dr_estimate(
    dataset: LoggedDataset,
    model: RewardModel,
    weights: WeightVector,
    eval_prop: np.ndarray,
) -> EstimateResult:
    """Direct-method baseline plus the weighted residual at the logged action."""
    pred = model.predict(dataset.contexts)
    eval_prop = np.asarray(eval_prop, dtype=float)
    if eval_prop.shape != pred.shape:
        raise ParameterError(f"eval_prop shape {eval_prop.shape} != predictions {pred.shape}")
    rewards = _check_pair(weights, dataset.rewards)
    n = rewards.shape[0]
    baseline = np.sum(eval_prop * pred, axis=1)
    resid = rewards - pred[np.arange(n), dataset.actions]
    return _result("dr", np.mean(baseline + weights.w * resid), weights)


# --------------------------------------------------------------------------
# reporting

CSV_COLUMNS = ("estimator", "seed", "value", "ess", "max_weight", "mean_weight", "clips")


def write_results_csv(rows: Iterable[tuple[int, EstimateResult]], path: Union[str, Path]) -> None:
    """Write ``(seed, result)`` pairs in the fixed column order."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for seed, res in rows:
            w.writerow([res.estimator, seed, repr(res.value), repr(res.ess), repr(res.max_weight),
                        repr(res.mean_weight), res.clips])
