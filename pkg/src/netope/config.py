"""Experiment configuration: flat key/value YAML files and named sweep presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional, Union

import yaml

from .classifier import ClassifierConfig
from .errors import ConfigError

ESTIMATORS = ("dm", "ipw", "snipw", "dr", "bipw", "sgipw", "oracle_ipw", "oracle_snipw", "intipw")
DEFAULT_ESTIMATORS = ("dm", "ipw", "snipw", "bipw", "sgipw", "dr", "intipw")


@dataclass(frozen=True)
class ExperimentConfig:
    """One point of a sweep. Every field is a config-file key with this default."""

    # graph
    graph: str = "er"  # er | ws | file
    n: int = 2000
    neighbors: float = 10  # ER: p = neighbors / n; WS: k = neighbors
    rewire_p: float = 0.1
    dataset: Optional[str] = None  # prepared dataset dir for graph: file
    # environment
    p_dim: int = 10
    n_actions: int = 2
    b: float = 1.0
    c: float = 1.0
    noise_sd: float = 1.0
    # policies
    beta_temp: float = 0.0
    gamma: float = 0.8
    # run
    estimators: tuple = DEFAULT_ESTIMATORS
    seeds: tuple = tuple(range(20))
    rollouts: Union[int, str] = 200
    log_mode: str = "sample"  # sample | enumerate (exact average over all behavior assignments)
    fixed_world: bool = False
    world_seed: int = 0
    # estimator settings
    reward_reg: float = 1.0
    sgipw_lambda: Optional[float] = None  # default 1 / sqrt(n)
    oracle_w_max: float = 1e4
    # classifier (IntIPW; BIPW reuses it without the graph)
    clf_embed_dim: int = 8
    clf_hidden_dim: int = 32
    clf_layers: int = 2
    clf_encoder_layers: int = 0
    clf_lr: float = 0.01
    clf_epochs: int = 300
    clf_weight_clip: float = 1e-3
    clf_resample: bool = False
    clf_weight_decay: float = 0.0
    clf_normalization: str = "row"  # row | sym | sum
    # output
    label: str = ""
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.graph not in ("er", "ws", "file"):
            raise ConfigError(f"graph must be er, ws or file, got {self.graph!r}")
        if self.graph == "file" and not self.dataset:
            raise ConfigError("graph: file needs a dataset directory")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        unknown = [e for e in self.estimators if e not in ESTIMATORS]
        if unknown:
            raise ConfigError(f"unknown estimator(s) {unknown}; choose from {ESTIMATORS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.rollouts != "exhaustive" and (not isinstance(self.rollouts, int) or self.rollouts < 1):
            raise ConfigError("rollouts must be a positive int or 'exhaustive'")
        if self.log_mode not in ("sample", "enumerate"):
            raise ConfigError("log_mode must be sample or enumerate")
        if self.clf_normalization not in ("row", "sym", "sum"):
            raise ConfigError("clf_normalization must be row, sym or sum")
        self.classifier_config()  # validates clf_* fields

    def classifier_config(self, seed: int = 0) -> ClassifierConfig:
        return ClassifierConfig(
            embed_dim=self.clf_embed_dim,
            hidden_dim=self.clf_hidden_dim,
            n_gcn_layers=self.clf_layers,
            encoder_layers=self.clf_encoder_layers,
            learning_rate=self.clf_lr,
            max_epochs=self.clf_epochs,
            weight_clip=self.clf_weight_clip,
            resample_eval_actions=self.clf_resample,
            weight_decay=self.clf_weight_decay,
            seed=seed,
        )

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["estimators"] = list(self.estimators)
        return d

    def fingerprint(self) -> str:
        """Short hash of every field that influences results."""
        d = self.to_dict()
        for k in ("label", "out_dir"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @property
    def name(self) -> str:
        return self.label or self.fingerprint()


FIELD_NAMES = tuple(f.name for f in fields(ExperimentConfig))


def config_from_mapping(mapping: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    unknown = sorted(set(mapping) - set(FIELD_NAMES))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    mapping = dict(mapping)
    if "seeds" in mapping and isinstance(mapping["seeds"], int):
        mapping["seeds"] = tuple(range(mapping["seeds"]))
    return dataclasses.replace(base or ExperimentConfig(), **mapping)


def load_config(path: Union[str, Path, None]) -> ExperimentConfig:
    """Read a flat YAML mapping; ``seeds: 20`` is shorthand for seeds 0..19."""
    if path is None:
        return ExperimentConfig()
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict) or any(isinstance(v, dict) for v in data.values()):
        raise ConfigError(f"{path}: config must be a flat key/value mapping")
    return config_from_mapping(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)


# --------------------------------------------------------------------------
# presets: (label, overrides) per sweep point, applied on top of the base config

BETAS = (-1.0, -0.75, -0.5, -0.25, 0.0)
SAMPLE_SIZES = (500, 700, 1000, 2500, 5000, 10000, 20000)
NEIGHBOR_COUNTS = (2, 6, 10, 20, 40, 80)
BC_PAIRS = ((0, -2), (0.5, -1.5), (1, -1), (1.5, -0.5), (2, 0), (1.5, 0.5), (1, 1), (0.5, 1.5), (0, 2))
ACTION_COUNTS = (2, 5, 10, 20)


def preset(name: str) -> list[tuple[str, dict]]:
    """Sweep points of a named preset.

    ``table1`` crosses ER/WS graphs with the behavior temperatures; ``fig2``
    varies n on ER; ``fig3`` varies WS neighbor counts; ``fig4`` varies the
    own/neighbor reward coefficients; ``fig5`` varies the action count;
    ``desk`` is the reduced ER temperature sweep used by the acceptance tests;
    ``full`` is ``table1`` at n = 10,000.
    """
    if name == "table1":
        return [(f"{g}_beta{b:g}", {"graph": g, "beta_temp": b}) for g in ("er", "ws") for b in BETAS]
    if name == "full":
        return [(f"{g}_beta{b:g}", {"graph": g, "beta_temp": b, "n": 10000}) for g in ("er", "ws") for b in BETAS]
    if name == "desk":
        return [(f"er_beta{b:g}", {"graph": "er", "beta_temp": b, "n": 2000}) for b in (-1.0, 0.0)]
    if name == "fig2":
        return [(f"n{n}", {"graph": "er", "n": n}) for n in SAMPLE_SIZES]
    if name == "fig3":
        return [(f"k{k}", {"graph": "ws", "n": 10000, "neighbors": k}) for k in NEIGHBOR_COUNTS]
    if name == "fig4":
        return [(f"b{b:g}_c{c:g}", {"b": float(b), "c": float(c)}) for b, c in BC_PAIRS]
    if name == "fig5":
        return [(f"D{d}", {"n_actions": d}) for d in ACTION_COUNTS]
    raise ConfigError(f"unknown preset {name!r}")


PRESETS = ("table1", "full", "desk", "fig2", "fig3", "fig4", "fig5")
