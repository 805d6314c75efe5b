"""
Experiment configuration.

A JSON file is validated against the voluptuous ``EXPERIMENT_SCHEMA`` (unknown
keys rejected, defaults filled in) and then converted into typed pydantic
models used by the rest of the package.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import voluptuous as vol
from pydantic import BaseModel, Field, ValidationError

from .const import (
    CRITERIA,
    CRITERION_GRASP,
    CRITERION_MAGNITUDE,
    CRITERION_OPD,
    CRITERION_RANDOM,
    CRITERION_SNIP,
    CURVATURE_DIAG_GGN,
    CURVATURE_KINDS,
    DEFAULT_HYPER_LR,
    DEFAULT_HYPER_STEPS,
    DEFAULT_MIN_LR,
    DEFAULT_MNIST_TRAIN_LIMIT,
    DEFAULT_PRIOR_PRECISION,
    DEFAULT_SCORING_BATCH,
    DEFAULT_SEEDS,
    DEFAULT_SPARSITIES,
    DEFAULT_TEMPERATURE,
    DEFAULT_TRAIN_FRACTION,
    MODE_MAP,
    MODE_SPAM,
    PRIOR_KINDS,
    PRIOR_PARAMETERWISE,
    PRIOR_SCALAR,
    RAMP_CUBIC,
    RAMP_LINEAR,
    SCOPE_GLOBAL,
    SCOPE_UNIFORM,
    TRAIN_MODES,
)
from .errors import ConfigError

_LOGGER = logging.getLogger(__name__)

DATASET_KINDS = ["mnist", "csv", "blobs", "noise_features", "linear"]
ACTIVATIONS = ["relu", "tanh", "identity"]
OPTIMIZERS = ["sgd", "adam"]

_positive = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_nonneg = vol.All(vol.Coerce(float), vol.Range(min=0))
_count = vol.All(int, vol.Range(min=0))
_positive_count = vol.All(int, vol.Range(min=1))
_fraction = vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False))

OPTIMIZER_SCHEMA = vol.Schema(
    {
        vol.Optional("name", default="adam"): vol.In(OPTIMIZERS),
        vol.Optional("momentum", default=0.9): _nonneg,
        vol.Optional("beta1", default=0.9): _fraction,
        vol.Optional("beta2", default=0.999): _fraction,
        vol.Optional("eps", default=1e-8): _positive,
    }
)

MARGLIK_SCHEMA = vol.Schema(
    {
        vol.Optional("prior", default=PRIOR_PARAMETERWISE): vol.In(PRIOR_KINDS),
        vol.Optional("prior_init", default=DEFAULT_PRIOR_PRECISION): _positive,
        vol.Optional("curvature", default=CURVATURE_DIAG_GGN): vol.In(CURVATURE_KINDS),
        vol.Optional("hyper_lr", default=DEFAULT_HYPER_LR): _positive,
        vol.Optional("hyper_steps", default=DEFAULT_HYPER_STEPS): _count,
        vol.Optional("n_epochs_burnin", default=0): _count,
        vol.Optional("marglik_frequency", default=1): _positive_count,
        vol.Optional("temperature", default=DEFAULT_TEMPERATURE): _positive,
    }
)

TRAIN_SCHEMA = vol.Schema(
    {
        vol.Optional("epochs", default=50): _count,
        vol.Optional("batch_size", default=64): _positive_count,
        vol.Optional("lr", default=1e-3): _positive,
        vol.Optional("min_lr", default=DEFAULT_MIN_LR): _nonneg,
        vol.Optional("optimizer", default={}): OPTIMIZER_SCHEMA,
        vol.Optional("prior", default=PRIOR_SCALAR): vol.In(PRIOR_KINDS),
        vol.Optional("prior_precision", default=DEFAULT_PRIOR_PRECISION): _positive,
        vol.Optional("marglik", default={}): MARGLIK_SCHEMA,
        vol.Optional("l1_lambda", default=0.0): _nonneg,
    }
)

PRUNE_SCHEMA = vol.Schema(
    {
        vol.Optional(
            "criteria",
            default=[
                CRITERION_OPD,
                CRITERION_MAGNITUDE,
                CRITERION_RANDOM,
                CRITERION_SNIP,
                CRITERION_GRASP,
            ],
        ): vol.All([vol.In(CRITERIA)], vol.Length(min=1)),
        vol.Optional("sparsities", default=list(DEFAULT_SPARSITIES)): vol.All(
            [_fraction], vol.Length(min=1)
        ),
        vol.Optional("scope", default=SCOPE_GLOBAL): vol.In([SCOPE_GLOBAL, SCOPE_UNIFORM]),
        vol.Optional("structured", default=False): bool,
        vol.Optional("exempt_last", default=None): vol.Any(None, bool),
        vol.Optional("finetune_epochs", default=0): _count,
        vol.Optional("post_compact_epochs", default=0): _count,
        vol.Optional("scoring_batch", default=DEFAULT_SCORING_BATCH): _positive_count,
        vol.Optional("curvature", default=CURVATURE_DIAG_GGN): vol.Any(
            None, vol.In(CURVATURE_KINDS)
        ),
        vol.Optional("online", default=False): bool,
        vol.Optional("target_sparsity", default=0.0): _fraction,
        vol.Optional("ramp", default=RAMP_LINEAR): vol.In([RAMP_LINEAR, RAMP_CUBIC]),
        vol.Optional("online_criterion", default=CRITERION_OPD): vol.In(CRITERIA),
    }
)

DATASET_SCHEMA = vol.Schema(
    {
        vol.Required("kind"): vol.In(DATASET_KINDS),
        vol.Optional("path", default=None): vol.Any(None, str),
        vol.Optional("data_dir", default=None): vol.Any(None, str),
        vol.Optional("train_limit", default=DEFAULT_MNIST_TRAIN_LIMIT): vol.Any(
            None, _positive_count
        ),
        vol.Optional("train_fraction", default=DEFAULT_TRAIN_FRACTION): _fraction,
        vol.Optional("n", default=500): _positive_count,
        vol.Optional("d", default=2): _positive_count,
        vol.Optional("d_noise", default=0): _count,
        vol.Optional("classes", default=2): _positive_count,
        vol.Optional("noise", default=1.0): _nonneg,
        vol.Optional("seed", default=0): int,
    }
)

ARCHITECTURE_SCHEMA = vol.Schema(
    {
        vol.Optional("hidden", default=[256]): [_positive_count],
        vol.Optional("activation", default="relu"): vol.In(ACTIVATIONS),
        vol.Optional("has_bias", default=True): bool,
    }
)

EXPERIMENT_SCHEMA = vol.Schema(
    {
        vol.Required("dataset"): DATASET_SCHEMA,
        vol.Optional("architecture", default={}): ARCHITECTURE_SCHEMA,
        vol.Optional("train", default={}): TRAIN_SCHEMA,
        vol.Optional("prune", default={}): PRUNE_SCHEMA,
        vol.Optional("seeds", default=list(DEFAULT_SEEDS)): vol.All(
            [int], vol.Length(min=1)
        ),
        vol.Optional("modes", default=[MODE_MAP, MODE_SPAM]): vol.All(
            [vol.In(TRAIN_MODES)], vol.Length(min=1)
        ),
        vol.Optional("output_dir", default="runs"): str,
    },
    extra=vol.PREVENT_EXTRA,
)


class OptimizerConfig(BaseModel):
    name: Literal["sgd", "adam"] = "adam"
    momentum: float = Field(default=0.9, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)


class MargLikConfig(BaseModel):
    """Settings of the prior-precision updates during SpaM training."""

    prior: str = PRIOR_PARAMETERWISE
    prior_init: float = Field(default=DEFAULT_PRIOR_PRECISION, gt=0)
    curvature: str = CURVATURE_DIAG_GGN
    hyper_lr: float = Field(default=DEFAULT_HYPER_LR, gt=0)
    hyper_steps: int = Field(default=DEFAULT_HYPER_STEPS, ge=0)
    n_epochs_burnin: int = Field(default=0, ge=0)
    marglik_frequency: int = Field(default=1, ge=1)
    temperature: float = Field(default=DEFAULT_TEMPERATURE, gt=0)


class TrainConfig(BaseModel):
    """
    Training settings shared by every mode.

    ``mode`` selects between a fixed prior (map), learned priors (spam) and
    an L1 penalty (l1).
    """

    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=64, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    min_lr: float = Field(default=DEFAULT_MIN_LR, ge=0)
    optimizer: OptimizerConfig = OptimizerConfig()
    seed: int = 0
    mode: str = MODE_MAP
    prior: str = PRIOR_SCALAR
    prior_precision: float = Field(default=DEFAULT_PRIOR_PRECISION, gt=0)
    marglik: MargLikConfig = MargLikConfig()
    l1_lambda: float = Field(default=0.0, ge=0)


class PruneConfig(BaseModel):
    criteria: List[str] = [
        CRITERION_OPD,
        CRITERION_MAGNITUDE,
        CRITERION_RANDOM,
        CRITERION_SNIP,
        CRITERION_GRASP,
    ]
    sparsities: List[float] = list(DEFAULT_SPARSITIES)
    scope: str = SCOPE_GLOBAL
    structured: bool = False
    exempt_last: Optional[bool] = None
    finetune_epochs: int = Field(default=0, ge=0)
    post_compact_epochs: int = Field(default=0, ge=0)
    scoring_batch: int = Field(default=DEFAULT_SCORING_BATCH, ge=1)
    # None forbids a post-hoc Laplace build when OPD meets a checkpoint without posterior
    curvature: Optional[str] = CURVATURE_DIAG_GGN
    online: bool = False
    target_sparsity: float = Field(default=0.0, ge=0, lt=1)
    ramp: str = RAMP_LINEAR
    online_criterion: str = CRITERION_OPD

    @property
    def effective_exempt_last(self) -> bool:
        """Output layer protection defaults on for structured pruning only."""
        return self.structured if self.exempt_last is None else self.exempt_last


class DatasetConfig(BaseModel):
    kind: str
    path: Optional[str] = None
    data_dir: Optional[str] = None
    train_limit: Optional[int] = DEFAULT_MNIST_TRAIN_LIMIT
    train_fraction: float = DEFAULT_TRAIN_FRACTION
    n: int = 500
    d: int = 2
    d_noise: int = 0
    classes: int = 2
    noise: float = 1.0
    seed: int = 0


class ArchitectureConfig(BaseModel):
    hidden: List[int] = [256]
    activation: str = "relu"
    has_bias: bool = True


class ExperimentConfig(BaseModel):
    dataset: DatasetConfig
    architecture: ArchitectureConfig = ArchitectureConfig()
    train: TrainConfig = TrainConfig()
    prune: PruneConfig = PruneConfig()
    seeds: List[int] = list(DEFAULT_SEEDS)
    modes: List[str] = [MODE_MAP, MODE_SPAM]
    output_dir: str = "runs"

    def train_config(self, mode: str, seed: int) -> TrainConfig:
        """Training settings for one (mode, seed) cell."""
        return self.train.model_copy(update={"mode": mode, "seed": seed})


def _humanize(err: vol.Invalid) -> str:
    path = ".".join(str(p) for p in err.path) or "<root>"
    return f"{path}: {err.msg}"


def parse_config(raw: Dict[str, Any]) -> ExperimentConfig:
    """Validate a raw configuration dict and build the typed config.

    Raises:
        ConfigError: The dict violates the schema.
    """
    try:
        validated = EXPERIMENT_SCHEMA(raw)
    except vol.MultipleInvalid as err:
        raise ConfigError(
            "Invalid configuration: " + "; ".join(_humanize(e) for e in err.errors)
        ) from err
    except vol.Invalid as err:
        raise ConfigError(f"Invalid configuration: {_humanize(err)}") from err
    train = dict(validated["train"])
    train["optimizer"] = OptimizerConfig(**train["optimizer"])
    train["marglik"] = MargLikConfig(**train["marglik"])
    try:
        return ExperimentConfig(
            dataset=DatasetConfig(**validated["dataset"]),
            architecture=ArchitectureConfig(**validated["architecture"]),
            train=TrainConfig(**train),
            prune=PruneConfig(**validated["prune"]),
            seeds=validated["seeds"],
            modes=validated["modes"],
            output_dir=validated["output_dir"],
        )
    except ValidationError as err:
        raise ConfigError(f"Invalid configuration: {err}") from err


def load_config(path: Path | str) -> ExperimentConfig:
    """Read and validate a JSON experiment configuration file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigError(f"Configuration file {path} not found") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err.msg} at line {err.lineno})") from err
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    config = parse_config(raw)
    _LOGGER.info("Loaded configuration %s (%s dataset)", path, config.dataset.kind)
    return config
