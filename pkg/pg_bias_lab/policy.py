# ABOUTME: This file defines the differentiable policy parameterizations used by the lab.
# ABOUTME: It covers tabular softmax, the tied alias policy and 2x16 ReLU MLPs with softmax or Gaussian heads.
"""
Policies expose log-probabilities, score vectors (gradients of the log-probability with
respect to a flat parameter vector), sampling, hidden features and JSON checkpoints.

Scores of the MLP kinds are computed by a hand-written reverse pass through
input -> 16 -> 16 -> head with ReLU activations.
"""
from __future__ import annotations

import json
import logging
import math
from abc import ABC, abstractmethod

import numpy as np

from .exceptions import (DimensionMismatchError, DomainError, NonFiniteError,
                         UnsupportedPolicyKindError)
from .mdp import draw_index

logger = logging.getLogger(__name__)

TABULAR_SOFTMAX = "tabular-softmax"
TIED_ALIAS = "tied-alias"
MLP_SOFTMAX = "mlp-softmax"
MLP_GAUSSIAN = "mlp-gaussian"
POLICY_KINDS = (TABULAR_SOFTMAX, TIED_ALIAS, MLP_SOFTMAX, MLP_GAUSSIAN)

HIDDEN_UNITS = (16, 16)
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
THETA_MIN, THETA_MAX = 1e-6, 1.0 - 1e-6
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - np.max(logits)
    return shifted - math.log(np.sum(np.exp(shifted)))


class MlpBody:
    """Dense ReLU network input -> 16 -> 16 -> output, parameters packed as W1, b1, W2, b2, W3, b3."""

    def __init__(self, input_dim: int, output_dim: int, hidden: tuple = HIDDEN_UNITS):
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.hidden = tuple(int(h) for h in hidden)
        sizes = (self.input_dim, *self.hidden, self.output_dim)
        self.layer_shapes = [(sizes[i + 1], sizes[i]) for i in range(len(sizes) - 1)]
        self.layer_slices = []
        offset = 0
        for n_out, n_in in self.layer_shapes:
            w_slice = slice(offset, offset + n_out * n_in)
            offset += n_out * n_in
            b_slice = slice(offset, offset + n_out)
            offset += n_out
            self.layer_slices.append((w_slice, b_slice))
        self.n_params = offset

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(params[w].reshape(shape), params[b])
                for (w, b), shape in zip(self.layer_slices, self.layer_shapes)]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        params = np.empty(self.n_params)
        for (w, b), (n_out, n_in) in zip(self.layer_slices, self.layer_shapes):
            bound = 1.0 / math.sqrt(n_in)
            params[w] = rng.uniform(-bound, bound, size=n_out * n_in)
            params[b] = rng.uniform(-bound, bound, size=n_out)
        return params

    def forward(self, params: np.ndarray, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Returns the cache [x, z1, a1, z2, a2, ...] and the linear output."""
        layers = self.unpack(params)
        cache = [x]
        activation = x
        for index, (weight, bias) in enumerate(layers):
            z = weight @ activation + bias
            if not np.all(np.isfinite(z)):
                raise NonFiniteError("Non-finite pre-activation", layer=index + 1)
            if index == len(layers) - 1:
                return cache, z
            activation = np.maximum(z, 0.0)
            cache.extend([z, activation])
        raise AssertionError("unreachable")

    def backward(self, params: np.ndarray, cache: list[np.ndarray], d_output: np.ndarray) -> np.ndarray:
        """Gradient of <d_output, output> with respect to the packed parameters."""
        layers = self.unpack(params)
        grad = np.zeros(self.n_params)
        delta = d_output
        for index in range(len(layers) - 1, -1, -1):
            weight, _ = layers[index]
            inputs = cache[2 * index]
            w_slice, b_slice = self.layer_slices[index]
            grad[w_slice] = np.outer(delta, inputs).ravel()
            grad[b_slice] = delta
            if index == 0:
                break
            delta = (weight.T @ delta) * (cache[2 * index - 1] > 0.0)
            if not np.all(np.isfinite(delta)):
                raise NonFiniteError("Non-finite backpropagated gradient", layer=index)
        return grad

    def forward_batch(self, params: np.ndarray, x: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Row-wise `forward` over an (n, input_dim) matrix."""
        layers = self.unpack(params)
        cache = [x]
        activation = x
        for index, (weight, bias) in enumerate(layers):
            z = activation @ weight.T + bias
            if not np.all(np.isfinite(z)):
                raise NonFiniteError("Non-finite pre-activation", layer=index + 1)
            if index == len(layers) - 1:
                return cache, z
            activation = np.maximum(z, 0.0)
            cache.extend([z, activation])
        raise AssertionError("unreachable")

    def backward_batch(self, params: np.ndarray, cache: list[np.ndarray], d_output: np.ndarray) -> np.ndarray:
        """Gradient of sum_i <d_output[i], output[i]>, i.e. `backward` summed over rows."""
        layers = self.unpack(params)
        grad = np.zeros(self.n_params)
        delta = d_output
        for index in range(len(layers) - 1, -1, -1):
            weight, _ = layers[index]
            w_slice, b_slice = self.layer_slices[index]
            grad[w_slice] = (delta.T @ cache[2 * index]).ravel()
            grad[b_slice] = delta.sum(axis=0)
            if index == 0:
                break
            delta = (delta @ weight) * (cache[2 * index - 1] > 0.0)
        if not np.all(np.isfinite(grad)):
            raise NonFiniteError("Non-finite backpropagated gradient")
        return grad

    def hidden_features(self, params: np.ndarray, x: np.ndarray, layer: int) -> np.ndarray:
        if layer not in range(1, len(self.hidden) + 1):
            raise DomainError("layer", layer, f"1..{len(self.hidden)}")
        cache, _ = self.forward(params, x)
        return cache[2 * layer].copy()

    def architecture(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "activation": "relu"}


class PolicyModel(ABC):
    """
    A differentiable policy pi_theta(a|s) over a flat parameter vector.

    Inference methods never mutate the policy; `set_params` and `project` are the only
    writers and are called by the training loop between updates.
    """
    kind: str = ""
    is_discrete: bool = True

    def __init__(self, params: np.ndarray):
        self._params = np.array(params, dtype=float)

    @property
    def n_params(self) -> int:
        return self._params.size

    def get_params(self) -> np.ndarray:
        return self._params.copy()

    def set_params(self, params: np.ndarray) -> None:
        params = np.asarray(params, dtype=float)
        if params.shape != self._params.shape:
            raise DimensionMismatchError(f"Expected {self._params.size} parameters, got {params.size}")
        self._params = params.copy()

    def clone(self) -> "PolicyModel":
        return policy_from_checkpoint(self.to_checkpoint())

    def with_params(self, params: np.ndarray) -> "PolicyModel":
        other = self.clone()
        other.set_params(params)
        return other

    def project(self) -> None:
        """Map parameters back into their feasible set after an update."""
        pass

    @abstractmethod
    def architecture(self) -> dict:
        ...

    @abstractmethod
    def log_prob_and_grad(self, state, action) -> tuple[float, np.ndarray]:
        ...

    @abstractmethod
    def sample_action(self, state, rng: np.random.Generator):
        ...

    def log_prob(self, state, action) -> float:
        return self.log_prob_and_grad(state, action)[0]

    def grad_log_prob(self, state, action) -> np.ndarray:
        return self.log_prob_and_grad(state, action)[1]

    def action_probabilities(self, state) -> np.ndarray:
        raise UnsupportedPolicyKindError(self.kind, "action_probabilities")

    def action_table(self, n_states: int) -> np.ndarray:
        raise UnsupportedPolicyKindError(self.kind, "action_table")

    def features(self, state, layer: int) -> np.ndarray:
        raise UnsupportedPolicyKindError(self.kind, "features")

    def to_checkpoint(self) -> dict:
        return {"kind": self.kind, "architecture": self.architecture(), "params": self._params.tolist()}

    def checkpoint_json(self) -> str:
        return json.dumps(self.to_checkpoint(), sort_keys=True)

    def save_checkpoint(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.checkpoint_json())
        logger.debug(f"Checkpoint for {self.kind} policy written to {path}")


class _DiscretePolicy(PolicyModel):
    """Shared sampling for policies with finitely many actions."""

    def sample_action(self, state, rng: np.random.Generator):
        action = draw_index(rng, self.action_probabilities(state))
        return action, self.log_prob(state, action)

    def _check_action(self, action, n_actions: int) -> int:
        if isinstance(action, (bool, np.bool_)) or not isinstance(action, (int, np.integer)) \
                or not 0 <= action < n_actions:
            raise DimensionMismatchError(f"Action {action!r} is not an index below {n_actions}")
        return int(action)


class TabularSoftmaxPolicy(_DiscretePolicy):
    """One independent softmax per state; the parameters are the [n_states * n_actions] logits, row-major."""
    kind = TABULAR_SOFTMAX

    def __init__(self, n_states: int, n_actions: int, params: np.ndarray | None = None):
        self.n_states = int(n_states)
        self.n_actions = int(n_actions)
        super().__init__(np.zeros(self.n_states * self.n_actions) if params is None else params)
        if self._params.size != self.n_states * self.n_actions:
            raise DimensionMismatchError("Tabular policy needs one logit per (state, action)")

    def architecture(self) -> dict:
        return {"n_states": self.n_states, "n_actions": self.n_actions}

    def _check_state(self, state) -> int:
        if not isinstance(state, (int, np.integer)) or not 0 <= state < self.n_states:
            raise DimensionMismatchError(f"State {state!r} is not an index below {self.n_states}")
        return int(state)

    def logits(self, state) -> np.ndarray:
        """Logit row of `state`, a view into the parameter vector."""
        s = self._check_state(state)
        return self._params[s * self.n_actions:(s + 1) * self.n_actions]

    def action_probabilities(self, state) -> np.ndarray:
        """
        Args:
            state: integer state index.

        Returns:
            pi(.|state) as a probability vector of length n_actions.
        """
        return np.exp(log_softmax(self.logits(state)))

    def action_table(self, n_states: int | None = None) -> np.ndarray:
        """[n_states, n_actions] table of pi(a|s); `n_states` is accepted for interface parity and ignored."""
        return np.vstack([self.action_probabilities(s) for s in range(self.n_states)])

    def log_prob_and_grad(self, state, action):
        """
        Args:
            state: integer state index.
            action: integer action index.

        Returns:
            (log pi(action|state), gradient) where the gradient is one_hot(action) - pi(.|state) on the
            logit row of `state` and zero elsewhere.

        Raises:
            DimensionMismatchError: if the state or action is out of range.
        """
        a = self._check_action(action, self.n_actions)
        s = self._check_state(state)
        log_probs = log_softmax(self.logits(s))
        grad = np.zeros_like(self._params)
        row = -np.exp(log_probs)
        row[a] += 1.0
        grad[s * self.n_actions:(s + 1) * self.n_actions] = row
        return float(log_probs[a]), grad


class TiedAliasPolicy(_DiscretePolicy):
    """Every state shares pi(go) = theta and pi(exit) = 1 - theta."""
    kind = TIED_ALIAS
    n_actions = 2

    def __init__(self, theta: float = 0.5, params: np.ndarray | None = None):
        super().__init__(np.array([theta]) if params is None else params)
        if self._params.size != 1:
            raise DimensionMismatchError("Tied alias policy has exactly one parameter")

    @property
    def theta(self) -> float:
        return float(self._params[0])

    def architecture(self) -> dict:
        return {"n_actions": 2}

    def project(self) -> None:
        self._params = np.clip(self._params, THETA_MIN, THETA_MAX)

    def action_probabilities(self, state=None) -> np.ndarray:
        return np.array([self.theta, 1.0 - self.theta])

    def action_table(self, n_states: int) -> np.ndarray:
        return np.tile(self.action_probabilities(), (n_states, 1))

    def log_prob_and_grad(self, state, action):
        a = self._check_action(action, 2)
        theta = self.theta
        if a == 0:
            return math.log(theta), np.array([1.0 / theta])
        return math.log(1.0 - theta), np.array([-1.0 / (1.0 - theta)])


class _MlpPolicy(PolicyModel):
    """Common state checking and hidden-feature access for the MLP kinds."""

    def __init__(self, body: MlpBody, params: np.ndarray):
        self.body = body
        super().__init__(params)

    def _check_state(self, state) -> np.ndarray:
        x = np.asarray(state, dtype=float).reshape(-1)
        if x.size != self.body.input_dim:
            raise DimensionMismatchError(f"State has {x.size} entries, expected {self.body.input_dim}")
        return x

    def _body_params(self) -> np.ndarray:
        return self._params[:self.body.n_params]

    def features(self, state, layer: int) -> np.ndarray:
        return self.body.hidden_features(self._body_params(), self._check_state(state), layer)


class MlpSoftmaxPolicy(_MlpPolicy, _DiscretePolicy):
    kind = MLP_SOFTMAX

    def __init__(self, obs_dim: int, n_actions: int, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        body = MlpBody(obs_dim, n_actions)
        self.n_actions = int(n_actions)
        if params is None:
            params = body.init_params(rng if rng is not None else np.random.default_rng(0))
        super().__init__(body, params)
        if self._params.size != body.n_params:
            raise DimensionMismatchError(f"Expected {body.n_params} parameters")

    def architecture(self) -> dict:
        return {**self.body.architecture(), "head": "softmax"}

    def action_probabilities(self, state) -> np.ndarray:
        _, logits = self.body.forward(self._params, self._check_state(state))
        return np.exp(log_softmax(logits))

    def log_prob_and_grad(self, state, action):
        a = self._check_action(action, self.n_actions)
        cache, logits = self.body.forward(self._params, self._check_state(state))
        log_probs = log_softmax(logits)
        d_logits = -np.exp(log_probs)
        d_logits[a] += 1.0
        return float(log_probs[a]), self.body.backward(self._params, cache, d_logits)


class MlpGaussianPolicy(_MlpPolicy):
    """Diagonal Gaussian with state-dependent mean and a state-independent log-std vector."""
    kind = MLP_GAUSSIAN
    is_discrete = False

    def __init__(self, obs_dim: int, action_dim: int, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None, init_log_std: float = 0.0):
        body = MlpBody(obs_dim, action_dim)
        self.action_dim = int(action_dim)
        if params is None:
            params = np.concatenate([body.init_params(rng if rng is not None else np.random.default_rng(0)),
                                     np.full(action_dim, init_log_std)])
        super().__init__(body, params)
        if self._params.size != body.n_params + action_dim:
            raise DimensionMismatchError(f"Expected {body.n_params + action_dim} parameters")

    def architecture(self) -> dict:
        return {**self.body.architecture(), "head": "gaussian",
                "log_std_bounds": [LOG_STD_MIN, LOG_STD_MAX]}

    def log_std(self) -> np.ndarray:
        return np.clip(self._params[self.body.n_params:], LOG_STD_MIN, LOG_STD_MAX)

    def mean(self, state) -> np.ndarray:
        return self.body.forward(self._params, self._check_state(state))[1]

    def _check_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=float).reshape(-1)
        if a.size != self.action_dim:
            raise DimensionMismatchError(f"Action has {a.size} entries, expected {self.action_dim}")
        return a

    def sample_action(self, state, rng: np.random.Generator):
        action = self.mean(state) + np.exp(self.log_std()) * rng.standard_normal(self.action_dim)
        return action, self.log_prob(state, action)

    def log_prob_and_grad(self, state, action):
        a = self._check_action(action)
        cache, mu = self.body.forward(self._params, self._check_state(state))
        raw_log_std = self._params[self.body.n_params:]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        z = (a - mu) * np.exp(-log_std)
        log_prob = float(np.sum(-0.5 * z ** 2 - log_std - HALF_LOG_2PI))
        d_mu = z * np.exp(-log_std)
        inside = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
        d_log_std = (z ** 2 - 1.0) * inside
        grad = np.concatenate([self.body.backward(self._params, cache, d_mu), d_log_std])
        return log_prob, grad


def make_policy(kind: str, rng: np.random.Generator | None = None, *, n_states: int | None = None,
                n_actions: int | None = None, obs_dim: int | None = None, action_dim: int | None = None,
                init_theta: float = 0.5) -> PolicyModel:
    """Build a freshly initialized policy of the requested kind."""
    if kind == TABULAR_SOFTMAX:
        return TabularSoftmaxPolicy(n_states, n_actions)
    if kind == TIED_ALIAS:
        return TiedAliasPolicy(theta=init_theta)
    if kind == MLP_SOFTMAX:
        return MlpSoftmaxPolicy(obs_dim, n_actions, rng=rng)
    if kind == MLP_GAUSSIAN:
        return MlpGaussianPolicy(obs_dim, action_dim, rng=rng)
    raise UnsupportedPolicyKindError(kind, "make_policy")


def policy_from_checkpoint(checkpoint: dict) -> PolicyModel:
    kind = checkpoint.get("kind")
    arch = checkpoint.get("architecture", {})
    params = np.array(checkpoint.get("params", []), dtype=float)
    if kind == TABULAR_SOFTMAX:
        return TabularSoftmaxPolicy(arch["n_states"], arch["n_actions"], params=params)
    if kind == TIED_ALIAS:
        return TiedAliasPolicy(params=params)
    if kind == MLP_SOFTMAX:
        return MlpSoftmaxPolicy(arch["input_dim"], arch["output_dim"], params=params)
    if kind == MLP_GAUSSIAN:
        return MlpGaussianPolicy(arch["input_dim"], arch["output_dim"], params=params)
    raise UnsupportedPolicyKindError(str(kind), "policy_from_checkpoint")


def policy_from_json(text: str) -> PolicyModel:
    return policy_from_checkpoint(json.loads(text))


def load_checkpoint(path) -> PolicyModel:
    with open(path, "r", encoding="utf-8") as f:
        return policy_from_json(f.read())
