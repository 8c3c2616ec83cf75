# ABOUTME: This file defines episodic MDPs (tabular, alias, chain, pendulum) and trajectory sampling.
# ABOUTME: It also provides the exact dynamic-programming oracles for occupancy, q-values and returns.
"""
Episodic environments and exact oracles.

A `TabularMdp` keeps explicit transition and reward tensors plus a dedicated
absorbing terminal state. Occupancy weights are kept unnormalized, as sums of
visitation probabilities over time; call `OccupancyWeights.normalized()` when
an expectation over states is needed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .exceptions import (DomainError, InvalidMdpError, NonEpisodicError,
                         NonFiniteError)

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-12
EPISODIC_HORIZON = 10_000
EPISODIC_MASS_LIMIT = 1e-9
OCCUPANCY_MASS_TOLERANCE = 1e-12
DEFAULT_MAX_ITERATIONS = 100_000
DEFAULT_MAX_STEPS = 200

DISCOUNTED = "discounted"
UNDISCOUNTED = "undiscounted"
OCCUPANCY_MODES = (DISCOUNTED, UNDISCOUNTED)


@dataclass(frozen=True)
class TabularMdp:
    """Episodic MDP with explicit tensors; `transition[s, a, s']`, `reward[s, a]`."""
    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    initial_dist: np.ndarray
    terminal_index: int

    def __post_init__(self):
        transition = np.array(self.transition, dtype=float)
        reward = np.array(self.reward, dtype=float)
        initial_dist = np.array(self.initial_dist, dtype=float)
        for array in (transition, reward, initial_dist):
            array.setflags(write=False)
        object.__setattr__(self, "transition", transition)
        object.__setattr__(self, "reward", reward)
        object.__setattr__(self, "initial_dist", initial_dist)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "terminal_index", int(self.terminal_index))
        self._validate()

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def non_terminal(self) -> np.ndarray:
        return np.array([s for s in range(self.n_states) if s != self.terminal_index])

    def _validate(self):
        n_states = self.transition.shape[0]
        if self.transition.ndim != 3 or self.transition.shape[2] != n_states:
            raise InvalidMdpError(f"Transition tensor must be [S][A][S], got shape {self.transition.shape}")
        if self.reward.shape != self.transition.shape[:2]:
            raise InvalidMdpError(f"Reward tensor must be [S][A], got shape {self.reward.shape}")
        if self.initial_dist.shape != (n_states,):
            raise InvalidMdpError(f"Initial distribution must have length {n_states}")
        if not 0.0 <= self.gamma < 1.0:
            raise InvalidMdpError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0 <= self.terminal_index < n_states:
            raise InvalidMdpError(f"terminal_index {self.terminal_index} out of range")
        if np.any(self.transition < 0) or not np.all(np.isfinite(self.transition)):
            raise InvalidMdpError("Transition probabilities must be finite and nonnegative")
        if not np.all(np.isfinite(self.reward)):
            raise InvalidMdpError("Rewards must be finite")
        row_error = np.max(np.abs(self.transition.sum(axis=2) - 1.0))
        if row_error > ROW_SUM_TOLERANCE:
            raise InvalidMdpError(f"Transition rows must sum to 1 (max deviation {row_error:.3e})")
        terminal = self.terminal_index
        if not np.all(self.transition[terminal, :, terminal] == 1.0):
            raise InvalidMdpError("Terminal state must self-loop with probability 1")
        if np.any(self.reward[terminal] != 0.0):
            raise InvalidMdpError("Terminal state must always receive zero reward")
        if np.any(self.initial_dist < 0) or abs(self.initial_dist.sum() - 1.0) > ROW_SUM_TOLERANCE:
            raise InvalidMdpError("Initial distribution must be a probability vector")
        if self.initial_dist[terminal] != 0.0:
            raise InvalidMdpError("Initial distribution must put no mass on the terminal state")
        self._check_episodic()

    def _check_episodic(self):
        # Bounded-horizon mass test under the uniform policy.
        nt = self.non_terminal
        uniform_block = self.transition.mean(axis=1)[np.ix_(nt, nt)]
        survival = self.initial_dist[nt] @ np.linalg.matrix_power(uniform_block, EPISODIC_HORIZON)
        if survival.sum() >= EPISODIC_MASS_LIMIT:
            raise NonEpisodicError(
                f"Non-terminal mass {survival.sum():.3e} remains after {EPISODIC_HORIZON} steps "
                f"under the uniform policy")

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "terminal_index": self.terminal_index,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularMdp":
        try:
            mdp = cls(transition=data["transition"], reward=data["reward"], gamma=data["gamma"],
                      initial_dist=data["initial_dist"], terminal_index=data["terminal_index"])
        except KeyError as e:
            raise InvalidMdpError(f"MDP document is missing field {e}")
        if mdp.n_states != data.get("n_states", mdp.n_states) or mdp.n_actions != data.get("n_actions", mdp.n_actions):
            raise InvalidMdpError("Declared n_states/n_actions disagree with the tensors")
        return mdp

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        logger.info(f"MDP saved to {path}")

    @classmethod
    def load(cls, path) -> "TabularMdp":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class OccupancyWeights:
    """Unnormalized (possibly discounted) expected visit counts; terminal entry is 0."""
    weights: np.ndarray
    mode: str

    def normalized(self) -> np.ndarray:
        total = self.weights.sum()
        if total <= 0:
            raise NonEpisodicError("Occupancy has no mass to normalize")
        return self.weights / total


class AliasFixedPoints(NamedTuple):
    unbiased: float
    biased: float
    decay_ratio: float


# Alias MDP layout: s1 -> (go) -> s2 -> terminal. Both states share one action distribution.
ALIAS_S1, ALIAS_S2, ALIAS_TERMINAL = 0, 1, 2
ACTION_GO, ACTION_EXIT = 0, 1


@dataclass(frozen=True)
class AliasMdp:
    """
    Two-state chain whose return under (p, q) is p * (1 - q) * gamma.

    p = pi(go | s1) and q = pi(go | s2). At s1, "go" moves to s2 and "exit" ends the
    episode with nothing; at s2, "exit" pays 1 and "go" ends the episode with nothing.
    With a perfect alias (epsilon = 0) the two states share one parameter, p = q.
    """
    gamma: float
    epsilon: float = 0.0
    mdp: TabularMdp = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise DomainError("gamma", self.gamma, "[0, 1)")
        if self.epsilon < 0.0:
            raise DomainError("epsilon", self.epsilon, ">= 0")
        transition = np.zeros((3, 2, 3))
        transition[ALIAS_S1, ACTION_GO, ALIAS_S2] = 1.0
        transition[ALIAS_S1, ACTION_EXIT, ALIAS_TERMINAL] = 1.0
        transition[ALIAS_S2, :, ALIAS_TERMINAL] = 1.0
        transition[ALIAS_TERMINAL, :, ALIAS_TERMINAL] = 1.0
        reward = np.zeros((3, 2))
        reward[ALIAS_S2, ACTION_EXIT] = 1.0
        mdp = TabularMdp(transition=transition, reward=reward, gamma=self.gamma,
                         initial_dist=np.array([1.0, 0.0, 0.0]), terminal_index=ALIAS_TERMINAL)
        object.__setattr__(self, "mdp", mdp)

    def policy_table(self, p: float, q: float) -> np.ndarray:
        return np.array([[p, 1.0 - p], [q, 1.0 - q], [0.5, 0.5]])

    def satisfies_alias(self, p: float, q: float) -> bool:
        """max_a |pi(a|s1) - pi(a|s2)| <= epsilon; with epsilon = 0 this forces p = q."""
        return abs(p - q) <= self.epsilon

    def return_of(self, p: float, q: float) -> float:
        return p * (1.0 - q) * self.gamma


def alias_fixed_points(gamma: float) -> AliasFixedPoints:
    """Converged tied policies of the unbiased and biased schemes and the biased return ratio."""
    if not 0.0 < gamma < 1.0:
        raise DomainError("gamma", gamma, "(0, 1)")
    return AliasFixedPoints(unbiased=0.5, biased=gamma / (1.0 + gamma),
                            decay_ratio=4.0 * gamma / (1.0 + gamma) ** 2)


def make_chain_mdp(n_states: int = 5, gamma: float = 0.9, slip: float = 0.1,
                   exit_reward: float = 0.2, goal_reward: float = 1.0) -> TabularMdp:
    """
    Chain of `n_states` decision states. "advance" (action 0) moves right, slipping into
    the terminal state with probability `slip`; advancing from the last state pays
    `goal_reward`. "exit" (action 1) terminates immediately with `exit_reward`.
    """
    if n_states < 1:
        raise DomainError("n_states", n_states, ">= 1")
    if not 0.0 <= slip < 1.0:
        raise DomainError("slip", slip, "[0, 1)")
    terminal = n_states
    transition = np.zeros((n_states + 1, 2, n_states + 1))
    reward = np.zeros((n_states + 1, 2))
    for s in range(n_states):
        if s < n_states - 1:
            transition[s, 0, s + 1] = 1.0 - slip
            transition[s, 0, terminal] = slip
        else:
            transition[s, 0, terminal] = 1.0
            reward[s, 0] = (1.0 - slip) * goal_reward
        transition[s, 1, terminal] = 1.0
        reward[s, 1] = exit_reward
    transition[terminal, :, terminal] = 1.0
    initial = np.zeros(n_states + 1)
    initial[0] = 1.0
    return TabularMdp(transition=transition, reward=reward, gamma=gamma,
                      initial_dist=initial, terminal_index=terminal)


def make_single_state_mdp(n_actions: int = 2, rewards: Sequence[float] | None = None,
                          gamma: float = 0.9) -> TabularMdp:
    """One decision state whose every action ends the episode."""
    transition = np.zeros((2, n_actions, 2))
    transition[:, :, 1] = 1.0
    reward = np.zeros((2, n_actions))
    if rewards is not None:
        reward[0] = rewards
    return TabularMdp(transition=transition, reward=reward, gamma=gamma,
                      initial_dist=np.array([1.0, 0.0]), terminal_index=1)


def random_episodic_mdp(rng: np.random.Generator, n_states: int, n_actions: int,
                        gamma: float = 0.9, terminal_mass: float = 0.05) -> TabularMdp:
    """Dirichlet(1) rows over the decision states with `terminal_mass` rerouted to terminal."""
    terminal = n_states
    transition = np.zeros((n_states + 1, n_actions, n_states + 1))
    transition[:n_states, :, :n_states] = (1.0 - terminal_mass) * rng.dirichlet(
        np.ones(n_states), size=(n_states, n_actions))
    transition[:n_states, :, terminal] = terminal_mass
    # Renormalize so float rounding cannot break the row-sum invariant.
    transition[:n_states] /= transition[:n_states].sum(axis=2, keepdims=True)
    transition[terminal, :, terminal] = 1.0
    reward = np.zeros((n_states + 1, n_actions))
    reward[:n_states] = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    initial = np.zeros(n_states + 1)
    initial[:n_states] = rng.dirichlet(np.ones(n_states))
    initial /= initial.sum()
    return TabularMdp(transition=transition, reward=reward, gamma=gamma,
                      initial_dist=initial, terminal_index=terminal)


def _check_policy_table(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    table = np.asarray(policy, dtype=float)
    if table.shape != (mdp.n_states, mdp.n_actions):
        raise DomainError("policy.shape", table.shape, f"({mdp.n_states}, {mdp.n_actions})")
    rows = table[mdp.non_terminal]
    if np.any(rows < 0) or np.max(np.abs(rows.sum(axis=1) - 1.0)) > 1e-10:
        raise DomainError("policy", "table", "rows that are probability distributions")
    return table


def policy_transition(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """State-to-state kernel P_pi[s, s'] = sum_a pi(a|s) P[s, a, s']."""
    return np.einsum("sa,sax->sx", policy, mdp.transition)


def expected_reward(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    return np.einsum("sa,sa->s", policy, mdp.reward)


def occupancy(mdp: TabularMdp, policy: np.ndarray, mode: str = DISCOUNTED,
              method: str = "solve", max_iterations: int = DEFAULT_MAX_ITERATIONS) -> OccupancyWeights:
    """
    Sum over time of state-visit probabilities, sum_k c^k Pr(s_k = s), with c = gamma
    (discounted) or c = 1 (undiscounted).

    Args:
        method: "solve" for the linear system (I - c P_pi^T) d = p0 on the decision
            states, "iterate" for the state-marginal recursion.
        max_iterations: iteration cap for "iterate"; exceeding it means the policy
            does not terminate.
    """
    if mode not in OCCUPANCY_MODES:
        raise DomainError("mode", mode, f"one of {OCCUPANCY_MODES}")
    table = _check_policy_table(mdp, policy)
    c = mdp.gamma if mode == DISCOUNTED else 1.0
    nt = mdp.non_terminal
    block = policy_transition(mdp, table)[np.ix_(nt, nt)]
    start = mdp.initial_dist[nt]

    if method == "iterate":
        marginal = start.copy()
        total = start.copy()
        for _ in range(max_iterations):
            marginal = c * (marginal @ block)
            total += marginal
            if marginal.sum() < OCCUPANCY_MASS_TOLERANCE:
                break
        else:
            raise NonEpisodicError(
                f"Occupancy recursion did not converge within {max_iterations} iterations")
        weights_nt = total
    elif method == "solve":
        try:
            weights_nt = np.linalg.solve(np.eye(len(nt)) - c * block.T, start)
        except np.linalg.LinAlgError as e:
            raise NonEpisodicError(f"Occupancy system is singular: {e}")
        if not np.all(np.isfinite(weights_nt)) or np.any(weights_nt < -1e-9):
            raise NonEpisodicError("Occupancy solve produced invalid weights")
        weights_nt = np.clip(weights_nt, 0.0, None)
    else:
        raise DomainError("method", method, "'solve' or 'iterate'")

    weights = np.zeros(mdp.n_states)
    weights[nt] = weights_nt
    return OccupancyWeights(weights=weights, mode=mode)


def exact_v(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """
    State values under a stationary policy, solving (I - gamma P_pi) v = r_pi over the non-terminal states.

    Args:
        mdp: a validated episodic MDP.
        policy: [n_states, n_actions] action-probability table.

    Returns:
        v with one entry per state; v(terminal) = 0.

    Raises:
        NonEpisodicError: if the linear system is singular (gamma = 1 without guaranteed termination).
    """
    table = _check_policy_table(mdp, policy)
    nt = mdp.non_terminal
    block = policy_transition(mdp, table)[np.ix_(nt, nt)]
    try:
        v_nt = np.linalg.solve(np.eye(len(nt)) - mdp.gamma * block, expected_reward(mdp, table)[nt])
    except np.linalg.LinAlgError as e:
        raise NonEpisodicError(f"Value system is singular: {e}")
    v = np.zeros(mdp.n_states)
    v[nt] = v_nt
    return v


def exact_q(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """q = R + gamma * P v, with q(terminal, .) = 0."""
    v = exact_v(mdp, policy)
    q = mdp.reward + mdp.gamma * np.einsum("sax,x->sa", mdp.transition, v)
    q[mdp.terminal_index] = 0.0
    return q


def exact_return(mdp: TabularMdp, policy: np.ndarray) -> float:
    """Expected discounted return rho = sum_s p0(s) v(s)."""
    return float(mdp.initial_dist @ exact_v(mdp, policy))


@dataclass(frozen=True)
class PendulumEnv:
    """
    Deterministic swing-up pendulum. State is (angle, angular velocity) with the angle
    wrapped into [-pi, pi] and the velocity clipped to [-max_speed, max_speed]; the
    episode never terminates and is truncated after `max_steps`.
    """
    mass: float = 1.0
    length: float = 1.0
    gravity: float = 10.0
    dt: float = 0.05
    max_torque: float = 2.0
    max_speed: float = 8.0
    max_steps: int = DEFAULT_MAX_STEPS
    discrete_torques: tuple | None = None

    obs_dim = 2

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def n_actions(self) -> int | None:
        return len(self.discrete_torques) if self.discrete_torques else None

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return np.array([rng.uniform(-math.pi, math.pi), rng.uniform(-1.0, 1.0)])

    def torque(self, action) -> float:
        if self.discrete_torques is not None:
            return float(self.discrete_torques[int(action)])
        value = float(np.asarray(action, dtype=float).reshape(-1)[0])
        return float(np.clip(value, -self.max_torque, self.max_torque))

    def step(self, state: np.ndarray, action) -> tuple[np.ndarray, float]:
        angle, velocity = float(state[0]), float(state[1])
        u = self.torque(action)
        cost = angle ** 2 + 0.1 * velocity ** 2 + 0.001 * u ** 2
        acceleration = (3.0 * self.gravity / (2.0 * self.length) * math.sin(angle)
                        + 3.0 / (self.mass * self.length ** 2) * u)
        velocity = float(np.clip(velocity + acceleration * self.dt, -self.max_speed, self.max_speed))
        angle = _wrap_angle(angle + velocity * self.dt)
        return np.array([angle, velocity]), -cost


def _wrap_angle(angle: float) -> float:
    return ((angle + math.pi) % (2.0 * math.pi)) - math.pi


@dataclass(frozen=True)
class Step:
    state: object
    action: object
    reward: float
    behavior_log_prob: float
    timestep: int


@dataclass
class Trajectory:
    steps: list[Step] = field(default_factory=list)
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def rewards(self) -> np.ndarray:
        return np.array([step.reward for step in self.steps], dtype=float)

    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def discounted_return(self, gamma: float) -> float:
        return float(np.sum(self.rewards * gamma ** np.arange(len(self.steps))))

    def to_dict(self) -> dict:
        return {
            "truncated": self.truncated,
            "steps": [{
                "state": _to_jsonable(step.state),
                "action": _to_jsonable(step.action),
                "reward": step.reward,
                "behavior_log_prob": step.behavior_log_prob,
                "timestep": step.timestep,
            } for step in self.steps],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Trajectory":
        steps = [Step(state=_from_jsonable(s["state"]), action=_from_jsonable(s["action"]),
                      reward=float(s["reward"]), behavior_log_prob=float(s["behavior_log_prob"]),
                      timestep=int(s["timestep"])) for s in data["steps"]]
        return cls(steps=steps, truncated=bool(data["truncated"]))


def _to_jsonable(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.integer):
        return int(value)
    return value


def _from_jsonable(value):
    return np.array(value, dtype=float) if isinstance(value, list) else value


def write_trajectories_jsonl(path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for trajectory in trajectories:
            f.write(json.dumps(trajectory.to_dict()) + "\n")
    logger.debug(f"Trajectories written to {path}")


def read_trajectories_jsonl(path) -> list[Trajectory]:
    with open(path, "r", encoding="utf-8") as f:
        return [Trajectory.from_dict(json.loads(line)) for line in f if line.strip()]


def index_at(probs: np.ndarray, u: float) -> int:
    """
    Inverse CDF of a probability vector.

    Args:
        probs: non-negative weights, normalized here by their sum.
        u: a uniform draw in [0, 1).

    Returns:
        The first index whose cumulative weight exceeds `u`, capped at the last index.
    """
    cumulative = np.cumsum(probs)
    return min(int(np.searchsorted(cumulative, u * cumulative[-1], side="right")), len(probs) - 1)


def draw_index(rng: np.random.Generator, probs: np.ndarray) -> int:
    """Inverse-CDF draw from a probability vector."""
    return index_at(probs, rng.random())


def sample_episode(env: TabularMdp | PendulumEnv, policy, rng: np.random.Generator,
                   max_steps: int = DEFAULT_MAX_STEPS) -> Trajectory:
    """
    Roll out one episode: a ~ pi(.|s), then s' ~ P(.|s, a). Stops at the terminal state or
    after `max_steps` steps (then `truncated` is set).
    """
    trajectory = Trajectory()
    if isinstance(env, TabularMdp):
        state = draw_index(rng, env.initial_dist)
    else:
        state = env.reset(rng)
        max_steps = min(max_steps, env.max_steps)

    for k in range(max_steps):
        action, log_prob = policy.sample_action(state, rng)
        if not math.isfinite(log_prob):
            raise NonFiniteError(f"Non-finite behavior log-probability at step {k}")
        if isinstance(env, TabularMdp):
            reward = float(env.reward[state, action])
            next_state = draw_index(rng, env.transition[state, action])
            done = next_state == env.terminal_index
        else:
            next_state, reward = env.step(state, action)
            if not np.all(np.isfinite(next_state)):
                raise NonFiniteError(f"Non-finite pendulum state at step {k}")
            done = False
        trajectory.steps.append(Step(state=state, action=action, reward=reward,
                                     behavior_log_prob=float(log_prob), timestep=k))
        if done:
            return trajectory
        state = next_state

    trajectory.truncated = True
    return trajectory
