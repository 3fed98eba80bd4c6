"""Exact self-checks on small enumerable worlds.

Each check compares an implementation against an independent exact answer
(full enumeration of joint assignments, closed-form odds, finite differences
or an algebraic identity) and reports expected vs actual values.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import env as E
from . import nn
from .classifier import ClassifierConfig, ClassifierModel, extract_weights
from .estimators import (
    ORACLE_W_MAX,
    RewardModel,
    WeightVector,
    dm_estimate,
    dr_estimate,
    ipw_estimate,
    oracle_joint_weights,
    snipw_estimate,
    vanilla_weights,
)
from .graph import NetworkGraph, augment, generate_erdos_renyi
from .harness import aggregate


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    expected: float
    actual: float
    tol: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: expected {self.expected:.12g}, actual {self.actual:.12g} (tol {self.tol:g}) {self.detail}".rstrip()


def _close(name, expected, actual, tol, detail="") -> CheckResult:
    ok = bool(np.isfinite(actual) and abs(actual - expected) <= tol)
    return CheckResult(name, ok, float(expected), float(actual), tol, detail)


def _at_most(name, bound, actual, detail="") -> CheckResult:
    return CheckResult(name, bool(actual <= bound), float(bound), float(actual), 0.0, detail)


# --------------------------------------------------------------------------
# fixtures


def cycle_graph(n: int) -> NetworkGraph:
    return NetworkGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)])


def path_graph(n: int) -> NetworkGraph:
    return NetworkGraph.from_edges(n, [(i, i + 1) for i in range(n - 1)])


@dataclass(frozen=True)
class ToyWorld:
    name: str
    graph: NetworkGraph
    env: E.EnvParams
    contexts: np.ndarray
    policy: E.PolicyParams

    @property
    def p0(self) -> np.ndarray:
        return E.behavior_propensity_matrix(self.env, self.policy, self.contexts)

    @property
    def pe(self) -> np.ndarray:
        return E.evaluation_propensity_matrix(self.env, self.policy, self.contexts)

    @property
    def kernel(self) -> E.RewardKernel:
        return E.RewardKernel(self.env, self.graph, self.contexts)


def toy_world(name: str, graph: NetworkGraph, gamma: float, beta_temp: float = 0.0, seed: int = 0, p_dim: int = 3) -> ToyWorld:
    """Noise-free world with D = 2 on a small graph."""
    rng = np.random.default_rng(seed)
    env = E.make_env(rng, p_dim=p_dim, d_actions=2, noise_sd=0.0)
    X = E.sample_contexts(graph.n, p_dim, rng)
    return ToyWorld(name, graph, env, X, E.PolicyParams(beta_temp, gamma))


def standard_fixtures() -> list[ToyWorld]:
    out = []
    for gname, g in (("cycle4", cycle_graph(4)), ("path6", path_graph(6))):
        for gamma in (0.8, 1.0):
            out.append(toy_world(f"{gname}/gamma={gamma:g}", g, gamma))
    return out


def _assignments(n: int, D: int) -> np.ndarray:
    return np.array(list(itertools.product(range(D), repeat=n)), dtype=np.int64)


def _joint_prob(probs: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.prod(probs[np.arange(probs.shape[0]), A], axis=1)


# --------------------------------------------------------------------------
# checks


def check_oracle_unbiasedness(world: ToyWorld, w_max: float = ORACLE_W_MAX, tol: float = 1e-10) -> CheckResult:
    """E over behavior assignments of mean(w_oracle * r) equals V(pi)."""
    p0, pe, kernel = world.p0, world.pe, world.kernel
    A = _assignments(world.graph.n, 2)
    probs = _joint_prob(p0, A)
    est = np.array([
        np.mean(oracle_joint_weights(world.graph, p0, pe, a, w_max).w * kernel.noise_free(a)) for a in A
    ])
    truth = E.true_policy_value(world.env, world.policy, world.graph, world.contexts, E.EXHAUSTIVE)
    return _close(f"oracle_unbiasedness[{world.name}]", truth, float(probs @ est), tol)


def check_mean_weight(world: ToyWorld, tol: float = 1e-10) -> CheckResult:
    """Every unit's vanilla weight has expectation 1 under the behavior policy."""
    p0, pe = world.p0, world.pe
    A = _assignments(world.graph.n, 2)
    probs = _joint_prob(p0, A)
    W = np.array([vanilla_weights(p0, pe, a).w for a in A])
    means = probs @ W
    worst = means[np.argmax(np.abs(means - 1.0))]
    return _close(f"mean_weight[{world.name}]", 1.0, float(worst), tol)


def check_variance_bound(world: ToyWorld, w_max: float = ORACLE_W_MAX) -> CheckResult:
    """Exact variance of self-normalized oracle IPW <= (1/n) 2 (W_max R_max)^2."""
    p0, pe, kernel = world.p0, world.pe, world.kernel
    n = world.graph.n
    A = _assignments(n, 2)
    probs = _joint_prob(p0, A)
    ests, wmax, rmax = [], 0.0, 0.0
    for a in A:
        wv = oracle_joint_weights(world.graph, p0, pe, a, w_max)
        r = kernel.noise_free(a)
        ests.append(snipw_estimate(wv, r).value)
        wmax, rmax = max(wmax, float(wv.w.max())), max(rmax, float(np.abs(r).max()))
    ests = np.array(ests)
    mean = probs @ ests
    var = float(probs @ (ests - mean) ** 2)
    bound = 2.0 * (wmax * rmax) ** 2 / n
    return _at_most(f"variance_bound[{world.name}]", bound, var, f"W_max={wmax:.4g} R_max={rmax:.4g}")


# discrete toy: two context values, two actions, a 3-unit path
TOY_PX = np.array([0.6, 0.4])
TOY_PI0 = np.array([[0.7, 0.3], [0.35, 0.65]])
TOY_PI1 = np.array([[0.2, 0.8], [0.9, 0.1]])
TOY_NEIGHBORHOODS = ((0, 1), (0, 1, 2), (1, 2))


def toy_configurations() -> list[tuple[int, tuple]]:
    """(unit, closed-neighborhood configuration) pairs in odds-table order.

    A configuration lists the members' contexts, then their actions.
    """
    return [
        (i, key)
        for i, members in enumerate(TOY_NEIGHBORHOODS)
        for key in sorted(itertools.product((0, 1), repeat=2 * len(members)))
    ]


def discrete_toy_odds() -> tuple[np.ndarray, np.ndarray]:
    """Bayes-optimal odds vs the joint propensity ratio on a 3-unit path.

    Contexts take 2 values i.i.d. with P(x=1) = 0.4; policies are fixed
    tables over D = 2 actions. For every unit and every configuration of
    its closed neighborhood, the Bayes classifier between (x, a ~ pi) and
    (x, a ~ pi0) with balanced classes has ``f = p1 / (p0 + p1)``, where the
    class-conditional laws are obtained by marginalizing the full joint over
    the units outside the neighborhood. Returns (odds, joint ratios), one
    entry per (unit, configuration).
    """
    px, pi0, pi1 = TOY_PX, TOY_PI0, TOY_PI1
    n = 3
    nbhd = dict(enumerate(TOY_NEIGHBORHOODS))
    configs = list(itertools.product((0, 1), repeat=2 * n))  # x0..x2, a0..a2

    def joint(pol, cfg):
        xs, acts = cfg[:n], cfg[n:]
        return float(np.prod([px[x] * pol[x, a] for x, a in zip(xs, acts)]))

    odds, ratios = [], []
    for i, members in nbhd.items():
        m0, m1 = {}, {}
        for cfg in configs:
            key = tuple(cfg[j] for j in members) + tuple(cfg[n + j] for j in members)
            m0[key] = m0.get(key, 0.0) + joint(pi0, cfg)
            m1[key] = m1.get(key, 0.0) + joint(pi1, cfg)
        k = len(members)
        for key in sorted(m0):
            f = m1[key] / (m0[key] + m1[key])
            odds.append(f / (1.0 - f))
            xs, acts = key[:k], key[k:]
            ratios.append(float(np.prod([pi1[x, a] / pi0[x, a] for x, a in zip(xs, acts)])))
    return np.array(odds), np.array(ratios)


def _scaled_error(odds: np.ndarray, ratios: np.ndarray) -> float:
    return float((np.abs(odds - ratios) / np.maximum(1.0, np.abs(ratios))).max())


def check_density_ratio(tol: float = 1e-9) -> CheckResult:
    odds, ratios = discrete_toy_odds()
    return _close("density_ratio_closed_form", 0.0, _scaled_error(odds, ratios), tol, f"{odds.size} configurations")


def trained_toy_odds(
    n_paths: int = 16_667,
    epochs: int = 1200,
    learning_rate: float = 0.05,
    final_learning_rate: float = 0.005,
    seed: int = 0,
) -> np.ndarray:
    """Odds of a classifier trained on disjoint copies of the discrete toy.

    Each unit carries a one-hot (context, action) cell; one sum-propagation
    layer adds the cells of its closed neighborhood before a logistic output,
    so the log-odds can represent the factorized joint log-ratio exactly.
    Every epoch draws fresh contexts, logged actions and evaluation actions
    for all ``3 * n_paths`` units. The second half of training uses
    ``final_learning_rate`` to damp the optimizer noise. Returns the
    model's odds in :func:`toy_configurations` order.
    """
    rng = np.random.default_rng(seed)
    n = 3 * n_paths
    graph = NetworkGraph.from_edges(n, [(3 * k + o, 3 * k + o + 1) for k in range(n_paths) for o in (0, 1)])
    P = augment(graph, "sum").a_norm
    store = nn.ParamStore()
    store.add("cells.W", np.zeros((4, 1)))
    store.add("cells.b", np.zeros((1, 1)))
    cells = np.eye(4)
    for epoch in range(epochs):
        x = rng.choice(2, size=n, p=TOY_PX)
        a0 = (rng.random(n) < TOY_PI0[x, 1]).astype(int)
        a1 = (rng.random(n) < TOY_PI1[x, 1]).astype(int)
        store.zero_grad()
        f_logged = nn.forward_layer(store, "cells", cells[2 * x + a0], "sigmoid", P)
        f_eval = nn.forward_layer(store, "cells", cells[2 * x + a1], "sigmoid", P)
        nn.bce(f_eval, f_logged).backward()
        lr = learning_rate if epoch < epochs // 2 else final_learning_rate
        nn.optimizer_step(store, lr, "adam")
    theta = store["cells.W"].value.ravel()
    bias = float(store["cells.b"].value.item())
    odds = []
    for i, key in toy_configurations():
        k = len(TOY_NEIGHBORHOODS[i])
        logit = bias + sum(theta[2 * x + a] for x, a in zip(key[:k], key[k:]))
        odds.append(np.exp(logit))
    return np.array(odds)


def check_trained_density_ratio(tol: float = 5e-2, **kwargs) -> CheckResult:
    _, ratios = discrete_toy_odds()
    odds = trained_toy_odds(**kwargs)
    return _close("density_ratio_trained", 0.0, _scaled_error(odds, ratios), tol, f"{odds.size} configurations")


def check_gradients(bce_grad_perturbation: float = 0.0, n_fixtures: int = 5, tol: float = 1e-4) -> list[CheckResult]:
    """Backprop vs central differences for the classifier loss and a linear stack."""
    out = []
    for k in range(n_fixtures):
        rng = np.random.default_rng(100 + k)
        n, p = 8 + k, 3
        g = generate_erdos_renyi(n, 0.4, rng)
        cfg = ClassifierConfig(embed_dim=3, hidden_dim=5, n_gcn_layers=1 + k % 3, encoder_layers=k % 2, seed=k)
        model = ClassifierModel(p, 3, cfg)
        for prm in model.store.params.values():
            prm.value[...] = rng.normal(0.0, 0.5, prm.value.shape)
        X = rng.standard_normal((n, p))
        a0, a1 = rng.integers(0, 3, n), rng.integers(0, 3, n)
        ag = augment(g, ("row", "sym", "sum")[k % 3])
        err = nn.grad_check(
            lambda: model.loss(ag, X, a0, a1, grad_perturbation=bce_grad_perturbation),
            model.store, rng=rng,
        )
        out.append(_at_most(f"grad_check[gcn fixture {k}]", tol, err, f"layers={cfg.n_gcn_layers} enc={cfg.encoder_layers}"))

        # linear-only stack: loss = sum(C * (P (P X W1 + b1) W2 + b2))
        store = nn.ParamStore()
        store.add("l0.W", rng.standard_normal((p, 4)))
        store.add("l0.b", rng.standard_normal((1, 4)))
        store.add("l1.W", rng.standard_normal((4, 2)))
        store.add("l1.b", rng.standard_normal((1, 2)))
        C = rng.standard_normal((n, 2))
        P = ag.a_norm

        def linear_loss():
            H = nn.forward_layer(store, "l0", nn.Tensor(X), "identity", P)
            H = nn.forward_layer(store, "l1", H, "identity", P)
            return nn.weighted_sum(H, C)

        err = nn.grad_check(linear_loss, store, rng=rng)
        out.append(_at_most(f"grad_check[linear fixture {k}]", 1e-6, err))
    return out


def check_mse_identity(n_vectors: int = 20, tol: float = 1e-12) -> CheckResult:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(n_vectors):
        k = int(rng.integers(2, 50))
        row = aggregate(rng.normal(0, rng.uniform(0.1, 3), k), rng.normal(0, 1, k))
        worst = max(worst, abs(row.mse - row.bias ** 2 - row.sd ** 2))
    return _close("mse_decomposition", 0.0, worst, tol)


def check_identical_policy() -> list[CheckResult]:
    """With pi == pi0 every weight is 1 and estimates equal the mean reward exactly."""
    g = path_graph(6)
    world = toy_world("identical", g, gamma=0.5, beta_temp=0.0)
    p0, pe = world.p0, world.pe
    rng = np.random.default_rng(3)
    a = E.sample_actions(p0, rng)
    r = world.kernel.noise_free(a) + rng.normal(0, 1, g.n)
    target = float(np.mean(r))
    model = ClassifierModel(world.contexts.shape[1], 2)
    w_int = WeightVector(extract_weights(model, augment(g), world.contexts, a, require_trained=False), "classifier-graph")
    vw = vanilla_weights(p0, pe, a)
    ow = oracle_joint_weights(g, p0, pe, a)
    cases = {
        "ipw": ipw_estimate(vw, r).value,
        "snipw": snipw_estimate(vw, r).value,
        "oracle_ipw": ipw_estimate(ow, r).value,
        "oracle_snipw": snipw_estimate(ow, r).value,
        "intipw_zero_init": snipw_estimate(w_int, r).value,
    }
    return [_close(f"identical_policy[{k}]", target, v, 0.0) for k, v in cases.items()]


def check_dr_identities() -> list[CheckResult]:
    world = toy_world("dr", path_graph(6), gamma=0.8)
    rng = np.random.default_rng(5)
    p0, pe = world.p0, world.pe
    a = E.sample_actions(p0, rng)
    log = E.LoggedDataset(world.graph, world.contexts, a, world.kernel.noise_free(a) + rng.normal(0, 1, 6))
    p = world.contexts.shape[1]
    zero = RewardModel(np.zeros((2, p)), np.zeros(2), np.ones(2, bool), 0.0, 0.0)
    some = RewardModel(rng.standard_normal((2, p)), rng.standard_normal(2), np.ones(2, bool), 0.0, 0.0)
    vw = vanilla_weights(p0, pe, a)
    w0 = WeightVector(np.zeros(6), "constant")
    return [
        _close("dr_identity[fhat=0 -> ipw]", ipw_estimate(vw, log.rewards).value, dr_estimate(log, zero, vw, pe).value, 0.0),
        _close("dr_identity[w=0 -> dm]", dm_estimate(log, some, pe).value, dr_estimate(log, some, w0, pe).value, 0.0),
    ]


def run_conformance_suite(
    w_max: float = ORACLE_W_MAX,
    bce_grad_perturbation: float = 0.0,
    with_training: bool = False,
) -> list[CheckResult]:
    """Run every exact check, plus the trained density-ratio check if ``with_training``.

    ``w_max`` and ``bce_grad_perturbation`` exist for mutation testing.
    """
    results: list[CheckResult] = []
    for world in standard_fixtures():
        results.append(check_oracle_unbiasedness(world, w_max))
        results.append(check_mean_weight(world))
        results.append(check_variance_bound(world, w_max))
    results.append(check_density_ratio())
    if with_training:
        results.append(check_trained_density_ratio())
    results.extend(check_gradients(bce_grad_perturbation))
    results.append(check_mse_identity())
    results.extend(check_identical_policy())
    results.extend(check_dr_identities())
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
