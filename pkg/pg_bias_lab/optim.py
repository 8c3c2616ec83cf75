# ABOUTME: This file implements the ascent optimizers (SGD, momentum, RMSProp, Adam) and the lr decay schedule.
# ABOUTME: It also computes the exact Fisher information of tabular policies and diagonal-FIM preconditioning.
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionMismatchError, DomainError, NonFiniteError, UnsupportedPolicyKindError
from .mdp import OccupancyWeights
from .policy import TABULAR_SOFTMAX, TIED_ALIAS, PolicyModel

logger = logging.getLogger(__name__)

SGD = "sgd"
MOMENTUM = "momentum"
RMSPROP = "rmsprop"
ADAM = "adam"
ALGORITHMS = (SGD, MOMENTUM, RMSPROP, ADAM)

# Framework defaults.
DEFAULT_MOMENTUM = 0.9
DEFAULT_RMSPROP_SMOOTHING = 0.99
DEFAULT_ADAM_BETAS = (0.9, 0.999)
DEFAULT_DELTA = 1e-8


@dataclass
class OptimState:
    """
    Hyperparameters and accumulators of one optimizer.

    `second_moment` is G for RMSProp and v for Adam; `momentum_buffer` is m for momentum
    and Adam. Both are created lazily with the parameter count on the first step.
    """
    algorithm: str = SGD
    lr: float = 1e-3
    momentum_coeff: float = DEFAULT_MOMENTUM
    rmsprop_smoothing: float = DEFAULT_RMSPROP_SMOOTHING
    adam_betas: tuple[float, float] = DEFAULT_ADAM_BETAS
    delta: float = DEFAULT_DELTA
    bias_correction: bool = True
    second_moment: np.ndarray | None = None
    momentum_buffer: np.ndarray | None = None
    step_count: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise DomainError("algorithm", self.algorithm, f"one of {ALGORITHMS}")
        if not (math.isfinite(self.lr) and self.lr > 0):
            raise DomainError("lr", self.lr, "> 0")
        if not 0.0 <= self.momentum_coeff < 1.0:
            raise DomainError("momentum_coeff", self.momentum_coeff, "in [0, 1)")
        if not 0.0 <= self.rmsprop_smoothing < 1.0:
            raise DomainError("rmsprop_smoothing", self.rmsprop_smoothing, "in [0, 1)")
        self.adam_betas = tuple(float(b) for b in self.adam_betas)
        if len(self.adam_betas) != 2 or not all(0.0 <= b < 1.0 for b in self.adam_betas):
            raise DomainError("adam_betas", self.adam_betas, "two values in [0, 1)")
        if not self.delta >= 0.0:
            raise DomainError("delta", self.delta, ">= 0")

    def copy(self) -> "OptimState":
        return OptimState.from_dict(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "algorithm": self.algorithm,
            "lr": self.lr,
            "momentum_coeff": self.momentum_coeff,
            "rmsprop_smoothing": self.rmsprop_smoothing,
            "adam_betas": list(self.adam_betas),
            "delta": self.delta,
            "bias_correction": self.bias_correction,
            "second_moment": None if self.second_moment is None else self.second_moment.tolist(),
            "momentum_buffer": None if self.momentum_buffer is None else self.momentum_buffer.tolist(),
            "step_count": self.step_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "OptimState":
        data = dict(data)
        for key in ("second_moment", "momentum_buffer"):
            if data.get(key) is not None:
                data[key] = np.array(data[key], dtype=float)
        return cls(**data)


def new_optim_state(algorithm: str, n_params: int, lr: float = 1e-3, **hyperparams) -> OptimState:
    """Fresh state with zeroed accumulators sized for `n_params` parameters."""
    state = OptimState(algorithm=algorithm, lr=lr, **hyperparams)
    state.second_moment = np.zeros(n_params)
    state.momentum_buffer = np.zeros(n_params)
    return state


def _safe_divide(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    # 0/0 (zero accumulator with delta = 0) is a zero step
    return np.divide(numerator, denominator, out=np.zeros_like(numerator), where=denominator > 0)


def optimizer_step(state: OptimState, params: np.ndarray, gradient: np.ndarray,
                   lr: float | None = None) -> tuple[np.ndarray, OptimState]:
    """
    One ascent step theta <- theta + update(gradient).

    Args:
        state: optimizer state; not mutated, an updated copy is returned.
        params: current flat parameters.
        gradient: ascent direction of the objective being maximized.
        lr: per-step learning rate overriding `state.lr` (used by schedules).

    Returns:
        (new_params, new_state)
    """
    lr = state.lr if lr is None else lr
    if not (math.isfinite(lr) and lr > 0):
        raise DomainError("lr", lr, "> 0")
    params = np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.shape:
        raise DimensionMismatchError(f"Gradient has {gradient.size} entries, parameters have {params.size}")
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteError("Optimizer received a non-finite gradient")

    new_state = OptimState(algorithm=state.algorithm, lr=state.lr, momentum_coeff=state.momentum_coeff,
                           rmsprop_smoothing=state.rmsprop_smoothing, adam_betas=state.adam_betas,
                           delta=state.delta, bias_correction=state.bias_correction,
                           step_count=state.step_count + 1)
    G = np.zeros_like(params) if state.second_moment is None else state.second_moment
    m = np.zeros_like(params) if state.momentum_buffer is None else state.momentum_buffer
    if G.shape != params.shape or m.shape != params.shape:
        raise DimensionMismatchError("Optimizer accumulators do not match the parameter count")

    if state.algorithm == SGD:
        update = lr * gradient
    elif state.algorithm == MOMENTUM:
        m = state.momentum_coeff * m + gradient
        update = lr * m
    elif state.algorithm == RMSPROP:
        rho = state.rmsprop_smoothing
        G = rho * G + (1.0 - rho) * gradient ** 2
        update = lr * _safe_divide(gradient, np.sqrt(G + state.delta))
    else:
        beta1, beta2 = state.adam_betas
        m = beta1 * m + (1.0 - beta1) * gradient
        G = beta2 * G + (1.0 - beta2) * gradient ** 2
        m_hat, v_hat = m, G
        if state.bias_correction:
            m_hat = m / (1.0 - beta1 ** new_state.step_count)
            v_hat = G / (1.0 - beta2 ** new_state.step_count)
        update = lr * _safe_divide(m_hat, np.sqrt(v_hat) + state.delta)

    new_state.second_moment = np.array(G)
    new_state.momentum_buffer = np.array(m)
    new_params = params + update
    if not np.all(np.isfinite(new_params)):
        raise NonFiniteError(f"{state.algorithm} step produced non-finite parameters")
    return new_params, new_state


@dataclass(frozen=True)
class LrSchedule:
    """base_lr decayed by `decay_factor` every `decay_every` epochs."""
    base_lr: float
    decay_factor: float = 1.0
    decay_every: int = 1

    def __post_init__(self):
        if not (math.isfinite(self.base_lr) and self.base_lr > 0):
            raise DomainError("base_lr", self.base_lr, "> 0")
        if not 0.0 < self.decay_factor <= 1.0:
            raise DomainError("decay_factor", self.decay_factor, "in (0, 1]")
        if int(self.decay_every) != self.decay_every or self.decay_every < 1:
            raise DomainError("decay_every", self.decay_every, "an integer >= 1")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    if epoch < 0:
        raise DomainError("epoch", epoch, ">= 0")
    return schedule.base_lr * schedule.decay_factor ** (epoch // schedule.decay_every)


@dataclass
class FimMatrix:
    full: np.ndarray
    diagonal: np.ndarray = field(init=False)

    def __post_init__(self):
        self.full = 0.5 * (self.full + self.full.T)
        self.diagonal = np.clip(np.diag(self.full).copy(), 0.0, None)


def _state_distribution(occupancy: OccupancyWeights | np.ndarray) -> np.ndarray:
    if isinstance(occupancy, OccupancyWeights):
        return occupancy.normalized()
    weights = np.asarray(occupancy, dtype=float)
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise DomainError("occupancy", weights.tolist(), "a probability distribution over states")
    return weights


def exact_fim(policy: PolicyModel, occupancy: OccupancyWeights | np.ndarray) -> FimMatrix:
    """F = E_{s ~ d} E_{a ~ pi} [grad log pi grad log pi^T], enumerated exactly."""
    if policy.kind not in (TABULAR_SOFTMAX, TIED_ALIAS):
        raise UnsupportedPolicyKindError(policy.kind, "exact_fim")
    distribution = _state_distribution(occupancy)
    full = np.zeros((policy.n_params, policy.n_params))
    for s, weight in enumerate(distribution):
        if weight == 0.0:
            continue
        probs = policy.action_probabilities(s)
        for a, prob in enumerate(probs):
            if prob == 0.0:
                continue
            score = policy.grad_log_prob(s, a)
            full += weight * prob * np.outer(score, score)
    return FimMatrix(full=full)


def fim_precondition(gradient: np.ndarray, fim_diag: np.ndarray, delta: float = DEFAULT_DELTA) -> np.ndarray:
    """g / sqrt(F_bar + delta), the same denominator form RMSProp uses."""
    fim_diag = np.asarray(fim_diag, dtype=float)
    if np.any(fim_diag < 0):
        raise DomainError("fim_diag", fim_diag.tolist(), ">= 0 elementwise")
    return np.asarray(gradient, dtype=float) / np.sqrt(fim_diag + delta)
