"""Synthetic networked contextual-bandit environment.

Actions are 0-based indices ``0 .. D-1``. The reward of unit ``i`` is::

    cbrt( b1'x * 1.5 ** (b2'x)
          + b * |b3'x + e(a_i)'x| ** 2
          + c * |b4'x + ebar_i'x| ** 2 * sqrt(deg_i) ) + eps_i

with ``ebar_i`` the mean reward-side embedding of the neighbors' actions and
``cbrt`` the real (sign-preserving) cube root.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError
from .graph import NetworkGraph

EXHAUSTIVE = "exhaustive"
MAX_EXHAUSTIVE = 2 ** 20


@dataclass(frozen=True)
class EnvParams:
    p_dim: int
    d_actions: int
    beta1: np.ndarray
    beta2: np.ndarray
    beta3: np.ndarray
    beta4: np.ndarray
    action_embeddings: np.ndarray
    b: float = 1.0
    c: float = 1.0
    noise_sd: float = 1.0
    seed: Optional[int] = None

    def __post_init__(self):
        if self.d_actions < 1:
            raise ParameterError("d_actions must be >= 1")
        for name in ("beta1", "beta2", "beta3", "beta4"):
            v = np.asarray(getattr(self, name), dtype=float)
            if v.shape != (self.p_dim,):
                raise ParameterError(f"{name} must have shape ({self.p_dim},)")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        emb = np.asarray(self.action_embeddings, dtype=float)
        if emb.shape != (self.d_actions, self.p_dim):
            raise ParameterError(f"action_embeddings must have shape ({self.d_actions}, {self.p_dim})")
        emb.setflags(write=False)
        object.__setattr__(self, "action_embeddings", emb)

    def to_dict(self) -> dict:
        return {
            "p_dim": self.p_dim,
            "d_actions": self.d_actions,
            "beta1": self.beta1.tolist(),
            "beta2": self.beta2.tolist(),
            "beta3": self.beta3.tolist(),
            "beta4": self.beta4.tolist(),
            "action_embeddings": self.action_embeddings.tolist(),
            "b": self.b,
            "c": self.c,
            "noise_sd": self.noise_sd,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvParams":
        return cls(**d)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "EnvParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PolicyParams:
    """Behavior softmax temperature ``beta_temp`` and evaluation greediness ``gamma``."""

    beta_temp: float = 0.0
    gamma: float = 0.8

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"gamma must lie in [0, 1], got {self.gamma}")


@dataclass(frozen=True)
class LoggedDataset:
    graph: NetworkGraph
    contexts: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        n = self.graph.n
        if self.contexts.shape[0] != n or self.actions.shape != (n,) or self.rewards.shape != (n,):
            raise ParameterError("dataset arrays must have one row per graph unit")

    @property
    def n(self) -> int:
        return self.graph.n


def make_env(
    rng: np.random.Generator,
    p_dim: int = 10,
    d_actions: int = 2,
    b: float = 1.0,
    c: float = 1.0,
    noise_sd: float = 1.0,
    seed: Optional[int] = None,
) -> EnvParams:
    """Draw the four coefficient vectors and the action embedding table i.i.d. N(0, 1)."""
    betas = rng.standard_normal((4, p_dim))
    emb = rng.standard_normal((d_actions, p_dim))
    return EnvParams(p_dim, d_actions, *betas, emb, b=b, c=c, noise_sd=noise_sd, seed=seed)


def sample_contexts(n: int, p_dim: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1 or p_dim < 1:
        raise ParameterError("n and p_dim must be >= 1")
    return rng.standard_normal((n, p_dim))


def _base_term(env: EnvParams, X: np.ndarray) -> np.ndarray:
    return (X @ env.beta1) * np.power(1.5, X @ env.beta2)


def r_direct(env: EnvParams, x: np.ndarray, a: int) -> float:
    """Neighbor-free reward proxy used by both policies."""
    x = np.asarray(x, dtype=float)
    own = env.beta3 @ x + env.action_embeddings[a] @ x
    return float((env.beta1 @ x) * 1.5 ** (env.beta2 @ x) + own * own)


def r_direct_matrix(env: EnvParams, X: np.ndarray) -> np.ndarray:
    """``r_direct`` for every unit and action, shape (n, D)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    own = (X @ env.beta3)[:, None] + X @ env.action_embeddings.T
    return _base_term(env, X)[:, None] + own ** 2


def reward(
    env: EnvParams,
    x: np.ndarray,
    a: int,
    neighbor_embed_mean: np.ndarray,
    deg: int,
    eps: float = 0.0,
) -> float:
    """Reward of a single unit given the mean embedding of its neighbors' actions."""
    x = np.asarray(x, dtype=float)
    own = env.beta3 @ x + env.action_embeddings[a] @ x
    nb = env.beta4 @ x + np.asarray(neighbor_embed_mean, dtype=float) @ x
    inner = (env.beta1 @ x) * 1.5 ** (env.beta2 @ x) + env.b * own ** 2 + env.c * nb ** 2 * np.sqrt(deg)
    return float(np.cbrt(inner) + eps)


class RewardKernel:
    """Vectorized reward evaluation for a fixed (env, graph, contexts) world.

    Precomputes every per-unit quantity that does not depend on the action
    assignment, so batches of joint assignments are cheap to score.
    """

    def __init__(self, env: EnvParams, graph: NetworkGraph, contexts: np.ndarray):
        X = np.asarray(contexts, dtype=float)
        if X.shape != (graph.n, env.p_dim):
            raise ParameterError(f"contexts must have shape ({graph.n}, {env.p_dim})")
        self.env, self.graph, self.contexts = env, graph, X
        self.base = _base_term(env, X)
        self.own_offset = X @ env.beta3
        self.nb_offset = X @ env.beta4
        self.proj = X @ env.action_embeddings.T  # proj[i, a] = e(a)'x_i
        deg = graph.degrees.astype(float)
        self.sqrt_deg = np.sqrt(deg)
        self.inv_deg = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
        m2 = graph.indices.shape[0]
        self.src = np.repeat(np.arange(graph.n), graph.degrees)
        self.dst = graph.indices
        # incidence (directed edge -> receiving unit)
        self.scatter = sp.csr_matrix(
            (np.ones(m2), (np.arange(m2), self.src)), shape=(m2, graph.n)
        )

    def noise_free(self, actions: np.ndarray) -> np.ndarray:
        """Noise-free rewards for one assignment (n,) or a batch (B, n)."""
        A = np.asarray(actions, dtype=np.int64)
        single = A.ndim == 1
        A = np.atleast_2d(A)
        n = self.graph.n
        rows = np.arange(n)
        own = self.own_offset + self.proj[rows, A]
        contrib = self.proj[self.src, A[:, self.dst]]
        nb = self.nb_offset + np.asarray(self.scatter.T @ contrib.T).T * self.inv_deg
        inner = self.base + self.env.b * own ** 2 + self.env.c * nb ** 2 * self.sqrt_deg
        out = np.cbrt(inner)
        return out[0] if single else out


def rewards_for_actions(
    env: EnvParams,
    graph: NetworkGraph,
    contexts: np.ndarray,
    actions: np.ndarray,
    eps: Optional[np.ndarray] = None,
) -> np.ndarray:
    r = RewardKernel(env, graph, contexts).noise_free(actions)
    return r if eps is None else r + eps


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def behavior_propensity_matrix(env: EnvParams, policy: PolicyParams, X: np.ndarray) -> np.ndarray:
    """Softmax of ``beta_temp * r_direct`` over actions, shape (n, D)."""
    rd = r_direct_matrix(env, X)
    if not np.all(np.isfinite(rd)):
        raise FloatingPointError("non-finite r_direct value")
    if policy.beta_temp == 0:
        return np.full(rd.shape, 1.0 / env.d_actions)
    return _softmax_rows(rd * policy.beta_temp)


def evaluation_propensity_matrix(env: EnvParams, policy: PolicyParams, X: np.ndarray) -> np.ndarray:
    """``gamma`` on the r_direct argmax (lowest index on ties), the rest spread evenly."""
    D = env.d_actions
    if D == 1:
        if policy.gamma < 1.0:
            raise ParameterError("a single action requires gamma == 1")
        return np.ones((np.atleast_2d(X).shape[0], 1))
    rd = r_direct_matrix(env, X)
    best = np.argmax(rd, axis=1)
    probs = np.full(rd.shape, (1.0 - policy.gamma) / (D - 1))
    probs[np.arange(rd.shape[0]), best] = policy.gamma
    return probs


def behavior_propensities(env: EnvParams, policy: PolicyParams, x: np.ndarray) -> np.ndarray:
    return behavior_propensity_matrix(env, policy, np.atleast_2d(x))[0]


def evaluation_propensities(env: EnvParams, policy: PolicyParams, x: np.ndarray) -> np.ndarray:
    return evaluation_propensity_matrix(env, policy, np.atleast_2d(x))[0]


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw one action per row of a propensity matrix by inverse CDF."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0])[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), probs.shape[1] - 1)


def generate_log(
    env: EnvParams,
    policy: PolicyParams,
    graph: NetworkGraph,
    rng: np.random.Generator,
    contexts: Optional[np.ndarray] = None,
) -> LoggedDataset:
    """Sample contexts (unless supplied), behavior actions and noisy rewards."""
    if contexts is None:
        contexts = sample_contexts(graph.n, env.p_dim, rng)
    contexts = np.asarray(contexts, dtype=float)
    actions = sample_actions(behavior_propensity_matrix(env, policy, contexts), rng)
    eps = rng.normal(0.0, env.noise_sd, size=graph.n) if env.noise_sd > 0 else np.zeros(graph.n)
    rewards = rewards_for_actions(env, graph, contexts, actions, eps)
    return LoggedDataset(graph, contexts, actions, rewards)


def _iter_assignments(n: int, D: int, chunk: int = 4096):
    it = itertools.product(range(D), repeat=n)
    while True:
        block = list(itertools.islice(it, chunk))
        if not block:
            return
        yield np.array(block, dtype=np.int64)


def enumerate_expectation(probs: np.ndarray, fn, chunk: int = 4096):
    """Exact ``E[fn(A)]`` over joint assignments with independent per-unit ``probs``.

    ``fn`` maps a (B, n) batch of assignments to a (B, ...) array. Returns the
    probability-weighted sum over all ``D**n`` assignments.
    """
    n, D = probs.shape
    if D ** n > MAX_EXHAUSTIVE:
        raise ParameterError(f"{D}**{n} joint assignments exceed the enumeration limit {MAX_EXHAUSTIVE}")
    total = None
    rows = np.arange(n)
    for A in _iter_assignments(n, D, chunk):
        p = np.prod(probs[rows, A], axis=1)
        vals = np.asarray(fn(A), dtype=float)
        part = np.tensordot(p, vals, axes=(0, 0))
        total = part if total is None else total + part
    return total


def policy_value_rollouts(
    env: EnvParams,
    policy: PolicyParams,
    graph: NetworkGraph,
    contexts: np.ndarray,
    rollouts: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-rollout unit-averaged noise-free rewards under the evaluation policy."""
    kernel = RewardKernel(env, graph, contexts)
    probs = evaluation_propensity_matrix(env, policy, contexts)
    out = np.empty(rollouts)
    for t in range(rollouts):
        out[t] = kernel.noise_free(sample_actions(probs, rng)).mean()
    return out


def true_policy_value(
    env: EnvParams,
    policy: PolicyParams,
    graph: NetworkGraph,
    contexts: np.ndarray,
    rollouts: Union[int, str] = 200,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Value of the evaluation policy on a fixed world (contexts and graph given).

    ``rollouts`` is a Monte-Carlo count or ``"exhaustive"`` for exact
    enumeration of all joint action assignments. A deterministic policy
    (``gamma == 1``) needs a single evaluation.
    """
    probs = evaluation_propensity_matrix(env, policy, contexts)
    kernel = RewardKernel(env, graph, contexts)
    if rollouts == EXHAUSTIVE:
        return float(enumerate_expectation(probs, lambda A: kernel.noise_free(A).mean(axis=1)))
    if not isinstance(rollouts, (int, np.integer)) or rollouts < 1:
        raise ParameterError(f"rollouts must be a positive int or {EXHAUSTIVE!r}")
    if np.all(probs.max(axis=1) == 1.0):
        return float(kernel.noise_free(np.argmax(probs, axis=1)).mean())
    if rng is None:
        raise ParameterError("Monte-Carlo ground truth needs a random generator")
    return float(policy_value_rollouts(env, policy, graph, contexts, int(rollouts), rng).mean())
