# ABOUTME: This file runs one training epoch of a policy on a frozen batch sampled under the epoch-start policy.
# ABOUTME: Exact, full-batch and minibatch modes share it; the harness and the bias-spread forks call it.
"""
One epoch = one fixed dataset D from pi_t and either

- exact:      one optimizer step along exact_pg (tabular environments only),
- full_batch: one optimizer step along estimate_gradient over all of D,
- minibatch:  K steps on minibatches drawn uniformly from D, per-step lr = lr * lr_scale / K
              (K defaults to |D|).

The surrogate ratio pi/pi_t always refers to the log-probabilities recorded under pi_t,
so within an epoch the minibatch steps are genuinely off-policy.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .estimator import SampleBatch, SurrogateSpec, estimate_gradient, exact_pg, minibatch_gradient
from .exceptions import DivergenceError, DomainError, EmptyDatasetError, NonFiniteError
from .mdp import TabularMdp
from .optim import SGD, OptimState, optimizer_step
from .policy import PolicyModel

logger = logging.getLogger(__name__)

EXACT = "exact"
FULL_BATCH = "full_batch"
MINIBATCH = "minibatch"
TRAINING_MODES = (EXACT, FULL_BATCH, MINIBATCH)


@dataclass(frozen=True)
class UpdateRule:
    """Estimator wiring of one trainer: surrogate, optimizer algorithm and lr multiplier."""
    name: str
    spec: SurrogateSpec
    algorithm: str = SGD
    lr_factor: float = 1.0


@dataclass(frozen=True)
class TrainingSettings:
    mode: str = MINIBATCH
    gamma: float = 0.99
    lr_scale: float = 1000.0
    inner_steps: int | None = None
    minibatch_size: int = 1
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.mode not in TRAINING_MODES:
            raise DomainError("mode", self.mode, f"one of {TRAINING_MODES}")
        if not 0.0 <= self.gamma < 1.0:
            raise DomainError("gamma", self.gamma, "in [0, 1)")
        if self.lr_scale <= 0:
            raise DomainError("lr_scale", self.lr_scale, "> 0")
        if self.inner_steps is not None and self.inner_steps < 1:
            raise DomainError("inner_steps", self.inner_steps, ">= 1")
        if self.minibatch_size < 1:
            raise DomainError("minibatch_size", self.minibatch_size, ">= 1")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise DomainError("max_grad_norm", self.max_grad_norm, "> 0")


@dataclass
class EpochResult:
    policy: PolicyModel
    optim_state: OptimState
    lr_used: float
    steps: int
    clamped_ratios: int = 0


def train_epoch(policy: PolicyModel, batch: SampleBatch | None, rule: UpdateRule, optim_state: OptimState,
                lr: float, settings: TrainingSettings, rng: np.random.Generator,
                mdp: TabularMdp | None = None) -> EpochResult:
    """
    Train a copy of `policy` for one epoch; the input policy and state are left untouched.

    Args:
        policy: pi_t, the epoch-start policy that generated `batch`.
        batch: the epoch dataset (unused in exact mode).
        lr: the scheduled epoch learning rate before `rule.lr_factor`.
        rng: stream for minibatch index draws.
        mdp: required in exact mode.
    """
    if optim_state.algorithm != rule.algorithm:
        raise DomainError("optim_state.algorithm", optim_state.algorithm, f"'{rule.algorithm}' for {rule.name}")
    try:
        result = _run_epoch(policy.clone(), batch, rule, optim_state, lr * rule.lr_factor, settings, rng, mdp)
    except NonFiniteError as e:
        raise DivergenceError(f"{rule.name}: {e}") from e
    logger.debug(f"{rule.name}: {result.steps} {settings.mode} step(s) at lr {result.lr_used:.3g}")
    return result


def _run_epoch(current: PolicyModel, batch: SampleBatch | None, rule: UpdateRule, state: OptimState,
               epoch_lr: float, settings: TrainingSettings, rng: np.random.Generator,
               mdp: TabularMdp | None) -> EpochResult:
    clamped = 0
    if settings.mode == EXACT:
        if mdp is None:
            raise DomainError("mdp", None, "a tabular MDP in exact mode")
        gradient = exact_pg(mdp, current, rule.spec.state_weighting)
        steps, step_lr = 1, epoch_lr
        state = _apply(current, state, gradient, step_lr, rule, settings.max_grad_norm)
    else:
        if batch is None or len(batch) == 0:
            raise EmptyDatasetError(f"{rule.name}: epoch dataset is empty")
        if settings.mode == FULL_BATCH:
            estimate = estimate_gradient(batch, current, None, rule.spec, settings.gamma)
            steps, step_lr, clamped = 1, epoch_lr, estimate.clamped_ratios
            state = _apply(current, state, estimate.gradient, step_lr, rule, settings.max_grad_norm)
        else:
            n = len(batch)
            steps = settings.inner_steps or n
            step_lr = epoch_lr * settings.lr_scale / steps
            for _ in range(steps):
                indices = rng.integers(0, n, size=settings.minibatch_size)
                gradient, count = minibatch_gradient(batch, indices, current, rule.spec, settings.gamma)
                clamped += count
                state = _apply(current, state, gradient, step_lr, rule, settings.max_grad_norm)

    return EpochResult(policy=current, optim_state=state, lr_used=step_lr, steps=steps, clamped_ratios=clamped)


def clip_gradient(gradient: np.ndarray, max_norm: float | None) -> np.ndarray:
    """Rescale `gradient` onto the L2 ball of radius `max_norm`; None disables clipping."""
    if max_norm is None:
        return gradient
    norm = float(np.linalg.norm(gradient))
    if norm <= max_norm:
        return gradient
    return gradient * (max_norm / norm)


def _apply(policy: PolicyModel, state: OptimState, gradient: np.ndarray, lr: float, rule: UpdateRule,
           max_grad_norm: float | None = None) -> OptimState:
    gradient = clip_gradient(gradient, max_grad_norm)
    params, state = optimizer_step(state, policy.get_params(), gradient, lr)
    policy.set_params(params)
    policy.project()
    if not np.all(np.isfinite(policy.get_params())):
        raise DivergenceError(f"{rule.name}: parameters became non-finite")
    return state
