"""Graph classifier that turns logged-vs-target discrimination into importance weights.

Every unit appears twice: once with its logged action (label 0) and once with
an action drawn from the evaluation policy (label 1). Both copies share the
contexts and the graph. A GCN over ``[x || e_phi(a)]`` outputs ``f``, the
probability that a unit's neighborhood configuration was generated by the
evaluation policy, so ``f / (1 - f)`` on the logged copy estimates the joint
propensity ratio of the unit and its neighbors.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

import numpy as np
import scipy.sparse as sp

from . import nn
from .env import sample_actions
from .errors import ConfigError, ParameterError, StateError, TrainingError
from .graph import AugmentedGraph


@dataclass(frozen=True)
class ClassifierConfig:
    embed_dim: int = 8
    hidden_dim: int = 32
    n_gcn_layers: int = 2
    learning_rate: float = 0.01
    max_epochs: int = 300
    weight_clip: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"
    resample_eval_actions: bool = False
    embed_init_scale: float = 0.1
    encoder_layers: int = 0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("embed_dim and hidden_dim must be >= 1")
        if self.n_gcn_layers not in (1, 2, 3):
            raise ConfigError(f"n_gcn_layers must be 1, 2 or 3, got {self.n_gcn_layers}")
        if not 0.0 < self.weight_clip < 0.5:
            raise ConfigError(f"weight_clip must lie in (0, 0.5), got {self.weight_clip}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def with_(self, **kw) -> "ClassifierConfig":
        return replace(self, **kw)


def _propagation(graph: Optional[Union[AugmentedGraph, sp.spmatrix]]) -> Optional[sp.csr_matrix]:
    if graph is None:
        return None
    if isinstance(graph, AugmentedGraph):
        return graph.a_norm
    return sp.csr_matrix(graph)


class ClassifierModel:
    """Learned action embeddings ``phi`` and GCN layer parameters.

    Layer ``k < L`` computes ``relu(P H W_k + b_k)``; the last layer computes
    ``sigmoid(P H W_L + b_L)`` with a scalar output per unit. ``P`` is the
    normalized self-loop adjacency, or the identity for the flat variant.
    The last layer starts at zero, so an untrained model outputs 0.5 everywhere.
    """

    def __init__(self, n_features: int, n_actions: int, config: ClassifierConfig = ClassifierConfig()):
        self.config = config
        self.n_features = n_features
        self.n_actions = n_actions
        self.trained = False
        self.loss_trace: list = []
        rng = np.random.default_rng(config.seed)
        self.store = nn.ParamStore()
        self.store.add("phi", config.embed_init_scale * rng.standard_normal((n_actions, config.embed_dim)))
        width = n_features + config.embed_dim
        for k in range(config.encoder_layers):
            self.store.add(f"enc{k}.W", nn.glorot(rng, width, config.hidden_dim))
            self.store.add(f"enc{k}.b", np.zeros((1, config.hidden_dim)))
            width = config.hidden_dim
        for k in range(config.n_gcn_layers):
            last = k == config.n_gcn_layers - 1
            out = 1 if last else config.hidden_dim
            W = np.zeros((width, out)) if last else nn.glorot(rng, width, out)
            self.store.add(f"gcn{k}.W", W)
            self.store.add(f"gcn{k}.b", np.zeros((1, out)))
            width = out

    @property
    def phi(self) -> np.ndarray:
        return self.store["phi"].value

    def build_h(self, contexts: np.ndarray, actions: np.ndarray) -> nn.Tensor:
        """Row ``i`` is ``[x_i || e_phi(a_i)]``."""
        X = np.asarray(contexts, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ParameterError(f"contexts must have {self.n_features} columns")
        actions = np.asarray(actions)
        if actions.shape != (X.shape[0],):
            raise ParameterError("need one action per context row")
        return nn.hconcat(nn.Tensor(X), nn.gather_rows(self.store["phi"], actions))

    def forward(self, graph, contexts: np.ndarray, actions: np.ndarray) -> nn.Tensor:
        """Classifier output as an (n, 1) tensor of probabilities."""
        P = _propagation(graph)
        H = self.build_h(contexts, actions)
        if P is not None and P.shape[0] != H.shape[0]:
            raise ParameterError(f"graph has {P.shape[0]} units, inputs have {H.shape[0]} rows")
        return self._layers(P, H)

    def _layers(self, P, H: nn.Tensor) -> nn.Tensor:
        for k in range(self.config.encoder_layers):
            H = nn.forward_layer(self.store, f"enc{k}", H, "relu")
        L = self.config.n_gcn_layers
        for k in range(L):
            H = nn.forward_layer(self.store, f"gcn{k}", H, "sigmoid" if k == L - 1 else "relu", P)
        return H

    def predict(self, graph, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self.forward(graph, contexts, actions).value.ravel()

    def loss(self, graph, contexts, logged_actions, eval_actions, grad_perturbation: float = 0.0) -> nn.Tensor:
        """BCE with evaluation-policy copies as the positive class."""
        f_logged = self.forward(graph, contexts, logged_actions)
        f_eval = self.forward(graph, contexts, eval_actions)
        return nn.bce(f_eval, f_logged, grad_perturbation)


def build_h(model: ClassifierModel, contexts: np.ndarray, actions: np.ndarray) -> np.ndarray:
    return model.build_h(contexts, actions).value


def gcn_forward(model: ClassifierModel, graph, h: np.ndarray) -> np.ndarray:
    """Forward pass on an explicit ``h`` matrix (no embedding lookup)."""
    P = _propagation(graph)
    return model._layers(P, nn.Tensor(np.asarray(h, dtype=float))).value.ravel()


def train(
    model: ClassifierModel,
    graph,
    contexts: np.ndarray,
    logged_actions: np.ndarray,
    eval_actions: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    eval_probs: Optional[np.ndarray] = None,
) -> ClassifierModel:
    """Full-batch training for ``config.max_epochs`` epochs.

    ``eval_actions`` stay fixed unless ``config.resample_eval_actions`` is
    set, in which case a fresh draw from ``eval_probs`` is used every epoch.
    The per-epoch loss (before the update) is stored in ``model.loss_trace``.
    """
    cfg = model.config
    if cfg.resample_eval_actions and (eval_probs is None or rng is None):
        raise ConfigError("resampling evaluation actions needs eval_probs and rng")
    trace = []
    actions_1 = np.asarray(eval_actions)
    for epoch in range(cfg.max_epochs):
        if cfg.resample_eval_actions and epoch > 0:
            actions_1 = sample_actions(eval_probs, rng)
        model.store.zero_grad()
        loss = model.loss(graph, contexts, logged_actions, actions_1)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingError("loss is not finite", epoch)
        trace.append(value)
        loss.backward()
        if cfg.weight_decay:
            for name, p in model.store.params.items():
                if name.endswith(".W") and p.grad is not None:
                    p.grad = p.grad + cfg.weight_decay * p.value
        nn.optimizer_step(model.store, cfg.learning_rate, cfg.optimizer)
    model.store.zero_grad()
    model.loss_trace = trace
    model.trained = True
    return model


def extract_weights(
    model: ClassifierModel,
    graph,
    contexts: np.ndarray,
    logged_actions: np.ndarray,
    require_trained: bool = True,
) -> np.ndarray:
    """Odds ``f / (1 - f)`` of the logged copies, with ``f`` clamped to ``[eps_w, 1 - eps_w]``."""
    if require_trained and not model.trained:
        raise StateError("classifier has not been trained")
    eps = model.config.weight_clip
    f = np.clip(model.predict(graph, contexts, logged_actions), eps, 1.0 - eps)
    return f / (1.0 - f)


def smoothed_trace(trace, window: int = 10) -> np.ndarray:
    """Means over consecutive non-overlapping windows of the loss trace."""
    t = np.asarray(trace, dtype=float)
    k = len(t) // window
    return t[: k * window].reshape(k, window).mean(axis=1)


def write_loss_trace(trace, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(trace):
            w.writerow([i, repr(float(v))])
