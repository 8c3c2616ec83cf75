# ABOUTME: This file implements Monte Carlo returns and the surrogate policy-gradient estimators.
# ABOUTME: It also holds the exact-gradient and finite-difference oracles the estimators are checked against.
"""
Gradient estimators for the iterative surrogate

    J(pi | pi_t) = E_{s ~ d} E_{a ~ pi_t} [ (pi/pi_t) q_hat + reg ]

The only difference between the unbiased and the biased estimator is the per-timestep
weight gamma^k (discounted state weighting) versus 1 (undiscounted). Monte Carlo returns
are used as they are, unless the batch was standardized (SampleBatch.standardized).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .exceptions import (DomainError, EmptyDatasetError, NonFiniteError,
                         UnsupportedPolicyKindError)
from .mdp import (DISCOUNTED, OCCUPANCY_MODES, UNDISCOUNTED, TabularMdp,
                  Trajectory, exact_q, occupancy)
from .policy import TABULAR_SOFTMAX, TIED_ALIAS, PolicyModel

logger = logging.getLogger(__name__)

REGULARIZER_NONE = "none"
REGULARIZER_KL = "kl"
REGULARIZER_REVERSE_KL = "reverse_kl"
REGULARIZERS = (REGULARIZER_NONE, REGULARIZER_KL, REGULARIZER_REVERSE_KL)
LOG_RATIO_CLAMP = 20.0

RETURN_SCALING_NONE = "none"
RETURN_SCALING_STANDARDIZE = "standardize"
RETURN_SCALINGS = (RETURN_SCALING_NONE, RETURN_SCALING_STANDARDIZE)
RETURN_SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class SurrogateSpec:
    """Which surrogate is optimized: state weighting, regularizer and importance weighting."""
    state_weighting: str = DISCOUNTED
    regularizer: str = REGULARIZER_NONE
    alpha: float = 0.0
    beta: float = 0.0
    use_importance_ratio: bool = True

    def __post_init__(self):
        if self.state_weighting not in OCCUPANCY_MODES:
            raise DomainError("state_weighting", self.state_weighting, f"one of {OCCUPANCY_MODES}")
        if self.regularizer not in REGULARIZERS:
            raise DomainError("regularizer", self.regularizer, f"one of {REGULARIZERS}")
        for name in ("alpha", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise DomainError(name, value, "finite and >= 0")

    @property
    def is_discounted(self) -> bool:
        return self.state_weighting == DISCOUNTED

    def describe(self) -> str:
        parts = ["unbiased" if self.is_discounted else "biased"]
        if self.regularizer == REGULARIZER_KL:
            parts.append(f"kl(alpha={self.alpha})")
        elif self.regularizer == REGULARIZER_REVERSE_KL:
            parts.append(f"reverse_kl(beta={self.beta})")
        return "+".join(parts)


@dataclass
class GradEstimate:
    gradient: np.ndarray
    n_trajectories: int
    objective_value: float
    standard_error: np.ndarray | None = None
    clamped_ratios: int = 0

    def to_dict(self) -> dict:
        return {
            "gradient": self.gradient.tolist(),
            "n_trajectories": self.n_trajectories,
            "objective_value": self.objective_value,
            "standard_error": None if self.standard_error is None else self.standard_error.tolist(),
            "clamped_ratios": self.clamped_ratios,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def mc_returns(trajectory: Trajectory, gamma: float) -> np.ndarray:
    """q_hat_k = sum_{j >= k} gamma^(j-k) r_j, by one backward pass."""
    if len(trajectory) == 0:
        raise EmptyDatasetError("Cannot compute returns of an empty trajectory")
    rewards = trajectory.rewards
    returns = np.empty_like(rewards)
    running = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        running = rewards[k] + gamma * running
        returns[k] = running
    return returns


@dataclass(frozen=True)
class SampleBatch:
    """Flattened (state, action, q_hat, timestep, behavior log-prob) view of a trajectory batch."""
    states: list
    actions: list
    returns: np.ndarray
    timesteps: np.ndarray
    behavior_log_probs: np.ndarray
    trajectory_index: np.ndarray
    n_trajectories: int
    mean_total_reward: float = 0.0

    def __len__(self) -> int:
        return len(self.states)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[Trajectory], gamma: float) -> "SampleBatch":
        if not trajectories:
            raise EmptyDatasetError("Dataset contains no trajectories")
        states, actions, returns, timesteps, log_probs, index = [], [], [], [], [], []
        for i, trajectory in enumerate(trajectories):
            returns.extend(mc_returns(trajectory, gamma))
            for step in trajectory.steps:
                states.append(step.state)
                actions.append(step.action)
                timesteps.append(step.timestep)
                log_probs.append(step.behavior_log_prob)
                index.append(i)
        return cls(states=states, actions=actions, returns=np.array(returns),
                   timesteps=np.array(timesteps, dtype=int), behavior_log_probs=np.array(log_probs),
                   trajectory_index=np.array(index, dtype=int), n_trajectories=len(trajectories),
                   mean_total_reward=float(np.mean([t.total_reward() for t in trajectories])))

    def subset(self, indices: Sequence[int]) -> "SampleBatch":
        indices = np.asarray(indices, dtype=int)
        return SampleBatch(states=[self.states[i] for i in indices],
                           actions=[self.actions[i] for i in indices],
                           returns=self.returns[indices], timesteps=self.timesteps[indices],
                           behavior_log_probs=self.behavior_log_probs[indices],
                           trajectory_index=self.trajectory_index[indices],
                           n_trajectories=self.n_trajectories, mean_total_reward=self.mean_total_reward)

    def probe(self) -> list[tuple]:
        return list(zip(self.states, self.actions))

    def with_returns(self, returns: np.ndarray) -> "SampleBatch":
        return SampleBatch(states=self.states, actions=self.actions, returns=np.asarray(returns, dtype=float),
                           timesteps=self.timesteps, behavior_log_probs=self.behavior_log_probs,
                           trajectory_index=self.trajectory_index, n_trajectories=self.n_trajectories,
                           mean_total_reward=self.mean_total_reward)

    def standardized(self) -> "SampleBatch":
        """
        Copy with q_hat shifted to zero mean and scaled to unit standard deviation over the batch.

        The per-timestep state weights are applied afterwards and are unchanged. Constant returns
        map to zeros.
        """
        if len(self) == 0:
            raise EmptyDatasetError("Cannot standardize the returns of an empty batch")
        centred = self.returns - self.returns.mean()
        scale = float(self.returns.std())
        if scale > RETURN_SCALE_FLOOR:
            centred = centred / scale
        return self.with_returns(centred)


def scale_returns(batch: SampleBatch, scaling: str) -> SampleBatch:
    if scaling == RETURN_SCALING_NONE:
        return batch
    if scaling == RETURN_SCALING_STANDARDIZE:
        return batch.standardized()
    raise DomainError("return_scaling", scaling, f"one of {RETURN_SCALINGS}")


@dataclass
class _ClampCounter:
    count: int = 0
    largest: float = 0.0

    def clamp(self, log_ratio: float) -> float:
        if abs(log_ratio) <= LOG_RATIO_CLAMP:
            return log_ratio
        self.count += 1
        self.largest = max(self.largest, abs(log_ratio))
        return math.copysign(LOG_RATIO_CLAMP, log_ratio)

    def report(self, where: str) -> None:
        if self.count:
            logger.warning(f"{where}: clamped {self.count} importance ratios "
                           f"(largest |log ratio| {self.largest:.2f})")


def _sample_contribution(policy: PolicyModel, spec: SurrogateSpec, gamma: float, state, action,
                         q_hat: float, timestep: int, behavior_log_prob: float,
                         counter: _ClampCounter) -> tuple[np.ndarray, float]:
    """Gradient and value of w_k * [ (pi/pi_t) q_hat + reg ] for one sample."""
    log_pi, score = policy.log_prob_and_grad(state, action)
    weight = gamma ** timestep if spec.is_discounted else 1.0
    ratio = math.exp(counter.clamp(log_pi - behavior_log_prob))
    q_ratio = ratio if spec.use_importance_ratio else 1.0
    coefficient = q_ratio * q_hat
    value = q_ratio * q_hat
    if spec.regularizer == REGULARIZER_KL:
        coefficient += spec.alpha
        value += spec.alpha * log_pi
    elif spec.regularizer == REGULARIZER_REVERSE_KL:
        coefficient += spec.beta * ratio * (behavior_log_prob - log_pi - 1.0)
        value += spec.beta * ratio * (behavior_log_prob - log_pi)
    return (weight * coefficient) * score, weight * value


def estimate_gradient(dataset: Sequence[Trajectory] | SampleBatch, policy: PolicyModel,
                      behavior: PolicyModel | None, spec: SurrogateSpec, gamma: float) -> GradEstimate:
    """
    Average over trajectories of sum_k w_k grad[ (pi/pi_t)(a_k|s_k) q_hat_k + reg_k ].

    Args:
        dataset: trajectories sampled under `behavior`, or their flattened SampleBatch.
        policy: the policy being optimized (pi).
        behavior: pi_t. If None, the log-probabilities recorded at sampling time are used.
    """
    batch = dataset if isinstance(dataset, SampleBatch) else SampleBatch.from_trajectories(dataset, gamma)
    if len(batch) == 0:
        raise EmptyDatasetError("Cannot estimate a gradient from an empty dataset")
    if behavior is not None and behavior.n_params != policy.n_params:
        raise DomainError("behavior.n_params", behavior.n_params, f"equal to {policy.n_params}")

    if behavior is not None:
        behavior_log_probs = np.array([behavior.log_prob(s, a) for s, a in zip(batch.states, batch.actions)])
    else:
        behavior_log_probs = batch.behavior_log_probs

    counter = _ClampCounter()
    per_trajectory = np.zeros((batch.n_trajectories, policy.n_params))
    values = np.zeros(batch.n_trajectories)
    for i in range(len(batch)):
        grad, value = _sample_contribution(policy, spec, gamma, batch.states[i], batch.actions[i],
                                           batch.returns[i], batch.timesteps[i], behavior_log_probs[i], counter)
        t = batch.trajectory_index[i]
        per_trajectory[t] += grad
        values[t] += value
    counter.report("estimate_gradient")

    n = batch.n_trajectories
    # Exactly rounded sums make the mean independent of trajectory order.
    gradient = np.array([math.fsum(per_trajectory[:, j]) for j in range(policy.n_params)]) / n
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteError("Gradient estimate is not finite")
    standard_error = per_trajectory.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros(policy.n_params)
    return GradEstimate(gradient=gradient, n_trajectories=n, objective_value=math.fsum(values) / n,
                        standard_error=standard_error, clamped_ratios=counter.count)


def minibatch_gradient(batch: SampleBatch, indices: Sequence[int], policy: PolicyModel,
                       spec: SurrogateSpec, gamma: float) -> tuple[np.ndarray, int]:
    """Mean single-sample surrogate gradient over `indices`; returns (gradient, clamped count)."""
    counter = _ClampCounter()
    gradient = np.zeros(policy.n_params)
    for i in indices:
        grad, _ = _sample_contribution(policy, spec, gamma, batch.states[i], batch.actions[i],
                                       batch.returns[i], batch.timesteps[i], batch.behavior_log_probs[i], counter)
        gradient += grad
    counter.report("minibatch_gradient")
    return gradient / max(len(indices), 1), counter.count


def exact_pg(mdp: TabularMdp, policy: PolicyModel, mode: str = DISCOUNTED) -> np.ndarray:
    """sum_s d(s) sum_a grad pi(a|s) q_pi(s, a) with exact occupancy and q-values."""
    if policy.kind not in (TABULAR_SOFTMAX, TIED_ALIAS):
        raise UnsupportedPolicyKindError(policy.kind, "exact_pg")
    table = policy.action_table(mdp.n_states)
    weights = occupancy(mdp, table, mode).weights
    q = exact_q(mdp, table)
    gradient = np.zeros(policy.n_params)
    for s in mdp.non_terminal:
        for a in range(mdp.n_actions):
            # grad pi = pi * grad log pi
            gradient += weights[s] * table[s, a] * policy.grad_log_prob(int(s), a) * q[s, a]
    return gradient


def finite_diff_grad(objective: Callable[[np.ndarray], float], params: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences (f(theta + h e_i) - f(theta - h e_i)) / 2h per coordinate."""
    if not h > 0:
        raise DomainError("h", h, "> 0")
    params = np.asarray(params, dtype=float)
    gradient = np.empty_like(params)
    for i in range(params.size):
        shifted = params.copy()
        shifted[i] = params[i] + h
        upper = objective(shifted)
        shifted[i] = params[i] - h
        lower = objective(shifted)
        if not (math.isfinite(upper) and math.isfinite(lower)):
            raise NonFiniteError(f"Objective is not finite around coordinate {i}")
        gradient[i] = (upper - lower) / (2.0 * h)
    return gradient


def spec_for(state_weighting: str, regularizer: str = REGULARIZER_NONE, coefficient: float = 0.0,
             use_importance_ratio: bool = True) -> SurrogateSpec:
    """Build a SurrogateSpec, routing `coefficient` to alpha (KL) or beta (reverse KL)."""
    return SurrogateSpec(state_weighting=state_weighting, regularizer=regularizer,
                         alpha=coefficient if regularizer == REGULARIZER_KL else 0.0,
                         beta=coefficient if regularizer == REGULARIZER_REVERSE_KL else 0.0,
                         use_importance_ratio=use_importance_ratio)


UNBIASED = SurrogateSpec(state_weighting=DISCOUNTED)
BIASED = SurrogateSpec(state_weighting=UNDISCOUNTED)
