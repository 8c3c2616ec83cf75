# ABOUTME: This file defines ExperimentConfig and the ConfigManager that loads, saves, overrides and validates it.
# ABOUTME: The manager also computes the SHA-256 hash recorded in every run manifest.
import copy
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

from .estimator import (REGULARIZER_KL, REGULARIZER_REVERSE_KL, REGULARIZERS, RETURN_SCALING_NONE,
                        RETURN_SCALING_STANDARDIZE, RETURN_SCALINGS, SurrogateSpec)
from .exceptions import ConfigError
from .mdp import DISCOUNTED, OCCUPANCY_MODES, UNDISCOUNTED
from .optim import (ALGORITHMS, DEFAULT_ADAM_BETAS, DEFAULT_DELTA, DEFAULT_MOMENTUM, DEFAULT_RMSPROP_SMOOTHING,
                    RMSPROP, SGD, LrSchedule)
from .policy import MLP_GAUSSIAN, MLP_SOFTMAX, POLICY_KINDS, TABULAR_SOFTMAX, TIED_ALIAS
from .trainer import EXACT, FULL_BATCH, MINIBATCH, TRAINING_MODES, TrainingSettings

logger = logging.getLogger(__name__)

ENV_ALIAS = "alias"
ENV_CHAIN = "chain"
ENV_PENDULUM = "pendulum"
ENVIRONMENTS = (ENV_ALIAS, ENV_CHAIN, ENV_PENDULUM)
TABULAR_ENVIRONMENTS = (ENV_ALIAS, ENV_CHAIN)

COMPATIBLE_POLICIES = {
    ENV_ALIAS: (TIED_ALIAS, TABULAR_SOFTMAX),
    ENV_CHAIN: (TABULAR_SOFTMAX,),
    ENV_PENDULUM: (MLP_GAUSSIAN, MLP_SOFTMAX),
}
CONTINUATION_FORKS = ("unbiased", "biased", "unbiased_corrected", "biased_corrected")

# Keys left out of the config hash: where results go and how many processes compute them.
UNHASHED_KEYS = ("output_dir", "workers")


@dataclass
class ScheduleConfig:
    lr: float = 3e-4
    decay_factor: float = 0.8
    decay_every: int = 30

    def to_schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay_factor, self.decay_every)


@dataclass
class OptimizerConfig:
    """Algorithm of the experimental variant plus hyperparameters shared by every optimizer."""
    algorithm: str = RMSPROP
    momentum: float = DEFAULT_MOMENTUM
    rmsprop_smoothing: float = DEFAULT_RMSPROP_SMOOTHING
    adam_betas: list = field(default_factory=lambda: list(DEFAULT_ADAM_BETAS))
    delta: float = DEFAULT_DELTA
    bias_correction: bool = True

    def hyperparams(self) -> dict:
        return {"momentum_coeff": self.momentum, "rmsprop_smoothing": self.rmsprop_smoothing,
                "adam_betas": tuple(self.adam_betas), "delta": self.delta,
                "bias_correction": self.bias_correction}


@dataclass
class SurrogateConfig:
    """State weighting used by bias-spread/off-policy runs and the experimental regularizer."""
    state_weighting: str = UNDISCOUNTED
    regularizer: str = REGULARIZER_KL
    alpha: float = 0.3
    beta: float = 0.3
    use_importance_ratio: bool = True

    def to_spec(self, state_weighting: str | None = None, regularized: bool = True) -> SurrogateSpec:
        regularizer = self.regularizer if regularized else "none"
        return SurrogateSpec(state_weighting=state_weighting or self.state_weighting, regularizer=regularizer,
                             alpha=self.alpha if regularizer == REGULARIZER_KL else 0.0,
                             beta=self.beta if regularizer == REGULARIZER_REVERSE_KL else 0.0,
                             use_importance_ratio=self.use_importance_ratio)


@dataclass
class PerturbationConfig:
    coordinate: int = 0
    threshold: float = 0.01
    state_indices: list | None = None
    weight: float = 5.0


@dataclass
class TrainingConfig:
    mode: str = MINIBATCH
    lr_scale: float = 1000.0
    inner_steps: int | None = None
    minibatch_size: int = 1
    return_scaling: str = RETURN_SCALING_NONE
    max_grad_norm: float | None = None


# Pendulum runs train on standardized returns under a per-step gradient-norm cap.
PENDULUM_MAX_GRAD_NORM = 10.0


def pendulum_training() -> TrainingConfig:
    return TrainingConfig(return_scaling=RETURN_SCALING_STANDARDIZE, max_grad_norm=PENDULUM_MAX_GRAD_NORM)


@dataclass
class ExperimentConfig:
    env: str = ENV_PENDULUM
    gamma: float = 0.99
    epochs: int = 100
    episodes_per_epoch: int = 10
    truncation: int = 200
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    baseline_optimizer: str = SGD
    lr_factor: float = 1.0
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    training: TrainingConfig = field(default_factory=pendulum_training)
    perturbation: PerturbationConfig | None = None
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    probe_size: int = 10_000
    output_dir: str = "runs"
    policy_kind: str = MLP_GAUSSIAN
    continue_with: str = "unbiased"
    self_test: bool = False
    workers: int = 1
    plots: bool = True
    record_wall_time: bool = False
    init_theta: float = 0.2
    chain_length: int = 5

    @property
    def is_tabular(self) -> bool:
        return self.env in TABULAR_ENVIRONMENTS

    def training_settings(self) -> TrainingSettings:
        return TrainingSettings(mode=self.training.mode, gamma=self.gamma, lr_scale=self.training.lr_scale,
                                inner_steps=self.training.inner_steps,
                                minibatch_size=self.training.minibatch_size,
                                max_grad_norm=self.training.max_grad_norm)


def default_config(env: str = ENV_PENDULUM) -> ExperimentConfig:
    """Per-environment defaults; the pendulum follows the inverted-pendulum hyperparameter row."""
    if env == ENV_PENDULUM:
        return ExperimentConfig()
    if env == ENV_ALIAS:
        return ExperimentConfig(env=ENV_ALIAS, gamma=0.9, epochs=300, episodes_per_epoch=200,
                                schedule=ScheduleConfig(lr=0.1, decay_factor=1.0, decay_every=1),
                                training=TrainingConfig(mode=FULL_BATCH), policy_kind=TIED_ALIAS,
                                probe_size=2_000, seeds=[0, 1, 2])
    if env == ENV_CHAIN:
        return ExperimentConfig(env=ENV_CHAIN, gamma=0.9, epochs=200, episodes_per_epoch=100,
                                schedule=ScheduleConfig(lr=0.5, decay_factor=1.0, decay_every=1),
                                training=TrainingConfig(mode=FULL_BATCH), policy_kind=TABULAR_SOFTMAX,
                                probe_size=2_000, seeds=[0, 1, 2])
    raise ConfigError(f"Unknown environment '{env}'; expected one of {ENVIRONMENTS}")


def payload_hash(data: dict) -> str:
    """SHA-256 of the sorted-key JSON encoding of `data`."""
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode("utf-8")).hexdigest()


def _build(cls, data, path: str):
    """Strictly build dataclass `cls` from a JSON object, nested dataclasses included."""
    if not isinstance(data, dict):
        raise ConfigError(f"'{path}' must be a JSON object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{path}': {', '.join(unknown)}")
    nested = {"schedule": ScheduleConfig, "optimizer": OptimizerConfig, "surrogate": SurrogateConfig,
              "training": TrainingConfig, "perturbation": PerturbationConfig}
    kwargs = {}
    for key, value in data.items():
        if key in nested and cls is ExperimentConfig and value is not None:
            kwargs[key] = _build(nested[key], value, f"{path}.{key}")
        else:
            kwargs[key] = value
    return cls(**kwargs)


class ConfigManager:
    """
    Owns one ExperimentConfig: JSON persistence, CLI overrides, validation and hashing.
    """

    def __init__(self, config: ExperimentConfig | None = None):
        self.config = config if config is not None else default_config()

    @classmethod
    def from_dict(cls, data: dict) -> "ConfigManager":
        try:
            manager = cls(_build(ExperimentConfig, data, "config"))
            manager.validate()
        except TypeError as e:
            raise ConfigError(f"Malformed configuration: {e}")
        return manager

    @classmethod
    def load(cls, path: str) -> "ConfigManager":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        logger.info(f"Configuration loaded from {path}")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self.config)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def save(self, path: str) -> None:
        try:
            with open(path, "w", encoding="utf-8") as f:
                f.write(self.to_json())
            logger.info(f"Configuration saved to {path}")
        except OSError as e:
            logger.error(f"Failed to save configuration to {path}: {e}")
            raise ConfigError(f"Could not write {path}: {e}")

    def config_hash(self) -> str:
        return payload_hash({k: v for k, v in self.to_dict().items() if k not in UNHASHED_KEYS})

    def apply_overrides(self, env: str | None = None, bias: str | None = None, optimizer: str | None = None,
                        regularizer: str | None = None, alpha: float | None = None, beta: float | None = None,
                        lr: float | None = None, gamma: float | None = None, seed: int | None = None,
                        out: str | None = None, workers: int | None = None) -> None:
        """Apply command-line overrides; None leaves a field unchanged."""
        config = self.config
        if env is not None and env != config.env:
            # switching environment restarts from that environment's defaults
            kept = {"seeds": config.seeds, "output_dir": config.output_dir, "workers": config.workers}
            config = default_config(env)
            for key, value in kept.items():
                setattr(config, key, value)
        if bias is not None:
            if bias not in ("on", "off"):
                raise ConfigError(f"--bias must be 'on' or 'off', got '{bias}'")
            config.surrogate.state_weighting = UNDISCOUNTED if bias == "on" else DISCOUNTED
        if optimizer is not None:
            config.optimizer.algorithm = optimizer
        if regularizer is not None:
            config.surrogate.regularizer = regularizer.replace("-", "_")
        if alpha is not None:
            config.surrogate.alpha = alpha
        if beta is not None:
            config.surrogate.beta = beta
        if lr is not None:
            config.schedule.lr = lr
        if gamma is not None:
            config.gamma = gamma
        if seed is not None:
            config.seeds = [seed]
        if out is not None:
            config.output_dir = out
        if workers is not None:
            config.workers = workers
        self.config = config
        self.validate()

    def copy(self) -> "ConfigManager":
        return ConfigManager(copy.deepcopy(self.config))

    def validate(self) -> None:
        """Raise ConfigError naming the first invalid field."""
        c = self.config

        def require(condition: bool, message: str):
            if not condition:
                raise ConfigError(message)

        def positive(value, name: str):
            require(isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
                    and value > 0, f"{name} must be a positive number, got {value!r}")

        def positive_int(value, name: str):
            require(isinstance(value, int) and not isinstance(value, bool) and value >= 1,
                    f"{name} must be an integer >= 1, got {value!r}")

        require(c.env in ENVIRONMENTS, f"env must be one of {ENVIRONMENTS}, got {c.env!r}")
        require(isinstance(c.gamma, (int, float)) and 0.0 < c.gamma < 1.0, f"gamma must be in (0, 1), got {c.gamma!r}")
        for name in ("epochs", "episodes_per_epoch", "truncation", "probe_size", "workers", "chain_length"):
            positive_int(getattr(c, name), name)
        positive(c.schedule.lr, "schedule.lr")
        require(isinstance(c.schedule.decay_factor, (int, float)) and 0.0 < c.schedule.decay_factor <= 1.0,
                f"schedule.decay_factor must be in (0, 1], got {c.schedule.decay_factor!r}")
        positive_int(c.schedule.decay_every, "schedule.decay_every")
        require(c.optimizer.algorithm in ALGORITHMS, f"optimizer.algorithm must be one of {ALGORITHMS}")
        require(c.baseline_optimizer in ALGORITHMS, f"baseline_optimizer must be one of {ALGORITHMS}")
        require(0.0 <= c.optimizer.momentum < 1.0, "optimizer.momentum must be in [0, 1)")
        require(0.0 <= c.optimizer.rmsprop_smoothing < 1.0, "optimizer.rmsprop_smoothing must be in [0, 1)")
        require(len(c.optimizer.adam_betas) == 2 and all(0.0 <= b < 1.0 for b in c.optimizer.adam_betas),
                "optimizer.adam_betas must be two values in [0, 1)")
        require(c.optimizer.delta >= 0.0, "optimizer.delta must be >= 0")
        positive(c.lr_factor, "lr_factor")
        require(c.surrogate.state_weighting in OCCUPANCY_MODES,
                f"surrogate.state_weighting must be one of {OCCUPANCY_MODES}")
        require(c.surrogate.regularizer in REGULARIZERS, f"surrogate.regularizer must be one of {REGULARIZERS}")
        require(c.surrogate.alpha >= 0 and c.surrogate.beta >= 0, "surrogate.alpha and surrogate.beta must be >= 0")
        require(c.training.mode in TRAINING_MODES, f"training.mode must be one of {TRAINING_MODES}")
        positive(c.training.lr_scale, "training.lr_scale")
        if c.training.inner_steps is not None:
            positive_int(c.training.inner_steps, "training.inner_steps")
        positive_int(c.training.minibatch_size, "training.minibatch_size")
        require(c.training.return_scaling in RETURN_SCALINGS,
                f"training.return_scaling must be one of {RETURN_SCALINGS}, got {c.training.return_scaling!r}")
        if c.training.max_grad_norm is not None:
            positive(c.training.max_grad_norm, "training.max_grad_norm")
        require(c.training.mode != EXACT or c.is_tabular, "training.mode 'exact' needs a tabular environment")
        require(isinstance(c.seeds, list) and len(c.seeds) > 0, "seeds must be a non-empty list")
        require(all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in c.seeds),
                "seeds must be non-negative integers")
        require(len(set(c.seeds)) == len(c.seeds), "seeds must be distinct")
        require(c.policy_kind in POLICY_KINDS, f"policy_kind must be one of {POLICY_KINDS}")
        require(c.policy_kind in COMPATIBLE_POLICIES[c.env],
                f"policy_kind {c.policy_kind!r} cannot act in env {c.env!r}")
        require(c.continue_with in CONTINUATION_FORKS, f"continue_with must be one of {CONTINUATION_FORKS}")
        require(0.0 < c.init_theta < 1.0, "init_theta must be in (0, 1)")
        if c.perturbation is not None:
            p = c.perturbation
            require(p.weight >= 1.0, f"perturbation.weight must be >= 1, got {p.weight!r}")
            positive(p.threshold, "perturbation.threshold")
            require(isinstance(p.coordinate, int) and p.coordinate >= 0, "perturbation.coordinate must be >= 0")
            if p.state_indices is not None:
                require(c.is_tabular, "perturbation.state_indices needs a tabular environment")
        logger.debug(f"Configuration valid (hash {self.config_hash()[:12]})")
