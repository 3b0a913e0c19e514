"""
Configuration records for the lifelong sequence-generation lab.

Every default of the lab lives here. A JSON config file may override any field,
section by section:

    {
        "backbone":   {...},   "expansion": {...},  "selection": {...},
        "adaptation": {...},   "taskgen":   {...},  "harness":   {...}
    }

Usage:
    from config import load_config
    config = load_config("lab.json")     # or LabConfig() for the defaults
"""

import json
import os
import logging
from dataclasses import dataclass, field, fields, asdict, replace
from typing import Optional, Tuple, Dict, Any

from errors import InvalidInputError

logger = logging.getLogger(__name__)

OPTIMIZERS = ("sgd", "adam")


@dataclass(frozen=True)
class NumericTolerances:
    """Fixed tolerances used by numerics checks and tests."""

    orthonormality: float = 1e-8
    reconstruction: float = 1e-6
    softmax_sum: float = 1e-9
    similarity_bounds: float = 1e-9
    sorted_values: float = 1e-12


TOLERANCES = NumericTolerances()


@dataclass(frozen=True)
class BackboneConfig:
    """Shape of the tiny frozen decoder-only backbone and its pretraining schedule."""

    num_layers: int = 2
    hidden_width: int = 64
    num_heads: int = 2
    ffn_width: int = 128
    vocab_size: int = 0  # 0 means "take it from the task vocabulary"
    max_sequence_length: int = 64
    adapter_bottleneck: int = 16
    seed: int = 0
    pretrain_steps: int = 2000
    pretrain_learning_rate: float = 3e-3
    pretrain_batch_size: int = 32
    pretrain_corpus_size: int = 4000

    def validate(self):
        if self.hidden_width % self.num_heads != 0:
            raise InvalidInputError(
                f"hidden_width {self.hidden_width} not divisible by num_heads {self.num_heads}"
            )
        if self.adapter_bottleneck < 1:
            raise InvalidInputError("adapter_bottleneck must be >= 1")
        if self.num_layers < 1 or self.max_sequence_length < 2:
            raise InvalidInputError("backbone needs at least one layer and two positions")


@dataclass(frozen=True)
class DecodeConfig:
    """Autoregressive decoding settings. strategy is 'greedy' or 'top_k'."""

    strategy: str = "greedy"
    top_k: int = 20
    temperature: float = 1.0
    max_new_tokens: int = 64
    seed: int = 0


@dataclass(frozen=True)
class ExpansionConfig:
    epochs: int = 6
    learning_rate: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "sgd"

    def validate(self):
        if self.epochs < 1:
            raise InvalidInputError("expansion epochs must be >= 1")
        _check_optimizer(self.optimizer)


@dataclass(frozen=True)
class SelectionConfig:
    n: int = 100
    epsilon: float = 0.95
    K: int = 1
    seed: int = 0
    norm: str = "frobenius"
    scorer: str = "subspace"

    def validate(self):
        if self.K < 1 or self.n < 1:
            raise InvalidInputError("selection requires K >= 1 and n >= 1")
        if not 0.0 < self.epsilon <= 1.0:
            raise InvalidInputError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.norm not in ("frobenius", "spectral"):
            raise InvalidInputError(f"unknown norm: {self.norm}")
        if self.scorer not in ("subspace", "frequency", "representation"):
            raise InvalidInputError(f"unknown similarity scorer: {self.scorer}")


@dataclass(frozen=True)
class AdaptationConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 16
    mu: float = 0.25
    pseudo_ratio: float = 0.2
    q: int = 100
    seed: int = 0
    optimizer: str = "sgd"
    pseudo_decode: DecodeConfig = field(
        default_factory=lambda: DecodeConfig(strategy="top_k", top_k=20, temperature=1.0)
    )

    def validate(self):
        if self.pseudo_ratio < 0:
            raise InvalidInputError("pseudo_ratio must be >= 0")
        if self.q < 1:
            raise InvalidInputError("q must be >= 1")
        if self.mu < 0:
            raise InvalidInputError("mu must be >= 0")
        _check_optimizer(self.optimizer)


@dataclass(frozen=True)
class TaskgenConfig:
    train_size: int = 200
    valid_size: int = 50
    test_size: int = 100
    seed: int = 0


@dataclass(frozen=True)
class HarnessConfig:
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    cache_dir: str = ".dmea_cache"
    threads: int = 1
    eval_split: str = "test"
    eval_decode: DecodeConfig = field(default_factory=DecodeConfig)


@dataclass(frozen=True)
class LabConfig:
    """All configuration sections of one experiment."""

    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    taskgen: TaskgenConfig = field(default_factory=TaskgenConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def validate(self) -> "LabConfig":
        self.backbone.validate()
        self.expansion.validate()
        self.selection.validate()
        self.adaptation.validate()
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["harness"]["seeds"] = list(self.harness.seeds)
        return data

    def with_seed(self, seed: int) -> "LabConfig":
        """Same configuration with every training-stage seed replaced by ``seed``; task data is unchanged."""
        return replace(
            self,
            expansion=replace(self.expansion, seed=seed),
            selection=replace(self.selection, seed=seed),
            adaptation=replace(
                self.adaptation,
                seed=seed,
                pseudo_decode=replace(self.adaptation.pseudo_decode, seed=seed),
            ),
        )


def _check_optimizer(name: str):
    if name not in OPTIMIZERS:
        raise InvalidInputError(f"unknown optimizer '{name}', expected one of {OPTIMIZERS}")


def _override(record, values: Dict[str, Any], section: str):
    """Return ``record`` with the fields in ``values`` replaced; unknown keys are rejected."""
    if not isinstance(values, dict):
        raise InvalidInputError(f"config section '{section}' must be a JSON object")

    known = {f.name: f for f in fields(record)}
    updates = {}
    for key, value in values.items():
        if key not in known:
            raise InvalidInputError(f"unknown config key '{section}.{key}'")
        current = getattr(record, key)
        if hasattr(current, "__dataclass_fields__"):
            value = _override(current, value, f"{section}.{key}")
        elif isinstance(current, tuple):
            value = tuple(value)
        updates[key] = value
    return replace(record, **updates)


def config_from_dict(data: Dict[str, Any]) -> LabConfig:
    """Build a LabConfig from a (possibly partial) nested dictionary."""
    config = LabConfig()
    for section, values in data.items():
        if section not in {f.name for f in fields(LabConfig)}:
            raise InvalidInputError(f"unknown config section '{section}'")
        config = replace(config, **{section: _override(getattr(config, section), values, section)})
    return config.validate()


def load_config(path: Optional[str] = None) -> LabConfig:
    """
    Load a lab configuration.

    Args:
        path: JSON config file. If None, the defaults are returned.

    Returns:
        Validated LabConfig. DMEA_THREADS, when set, overrides harness.threads.
    """
    config = LabConfig()
    if path:
        with open(path, "r") as f:
            data = json.load(f)
        config = config_from_dict(data)
        logger.info(f"Loaded configuration from {path}")

    threads = os.getenv("DMEA_THREADS")
    if threads:
        try:
            config = replace(config, harness=replace(config.harness, threads=max(1, int(threads))))
        except ValueError:
            raise InvalidInputError(f"DMEA_THREADS must be an integer, got '{threads}'")

    return config.validate()
