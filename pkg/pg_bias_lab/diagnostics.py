# ABOUTME: This file holds the measurement instruments: EARD model distance and the four-fork bias-spread step.
# ABOUTME: It also provides feature PCA with action correlation, a return-regression score model and loss surfaces.
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .estimator import LOG_RATIO_CLAMP, REGULARIZER_KL, SampleBatch, spec_for
from .exceptions import (DegenerateInputError, DivergenceError, DomainError, EmptyDatasetError, NonFiniteError,
                         UndefinedCorrelationError, UndefinedRatioError)
from .mdp import DISCOUNTED, UNDISCOUNTED, TabularMdp, Trajectory, index_at, occupancy
from .optim import ADAM, RMSPROP, SGD, LrSchedule, OptimState, lr_at, new_optim_state, optimizer_step
from .policy import TABULAR_SOFTMAX, MlpBody, PolicyModel
from .trainer import EpochResult, TrainingSettings, UpdateRule, train_epoch

logger = logging.getLogger(__name__)

DEFAULT_PROBE_SIZE = 10_000
DEGENERATE_SPREAD = 1e-12
SMOOTHING_WINDOW = 5

FORK_UNBIASED = "unbiased"
FORK_BIASED = "biased"
FORK_UNBIASED_CORRECTED = "unbiased_corrected"
FORK_BIASED_CORRECTED = "biased_corrected"
FORKS = (FORK_UNBIASED, FORK_BIASED, FORK_UNBIASED_CORRECTED, FORK_BIASED_CORRECTED)


# ---------------------------------------------------------------------------
# EARD
# ---------------------------------------------------------------------------

@dataclass
class EardResult:
    value: float
    n_samples: int
    clamped_ratios: int = 0
    standard_error: float = 0.0


def eard(probe: Sequence[tuple], pi_next: PolicyModel, pi_next_delta: PolicyModel) -> EardResult:
    """Mean over probe pairs of |pi_next(a|s) / pi_next_delta(a|s) - 1|, log-ratio clamped to +-20."""
    if len(probe) == 0:
        raise EmptyDatasetError("EARD needs at least one probe (state, action) pair")
    deviations = np.empty(len(probe))
    clamped = 0
    for i, (state, action) in enumerate(probe):
        log_ratio = pi_next.log_prob(state, action) - pi_next_delta.log_prob(state, action)
        if abs(log_ratio) > LOG_RATIO_CLAMP:
            clamped += 1
            log_ratio = math.copysign(LOG_RATIO_CLAMP, log_ratio)
        deviations[i] = abs(math.exp(log_ratio) - 1.0)
    if clamped:
        logger.warning(f"eard: clamped {clamped} of {len(probe)} log-ratios to +-{LOG_RATIO_CLAMP}")
    n = len(probe)
    se = float(deviations.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return EardResult(value=math.fsum(deviations) / n, n_samples=n, clamped_ratios=clamped, standard_error=se)


def _as_table(policy: PolicyModel | np.ndarray, mdp: TabularMdp) -> np.ndarray:
    if isinstance(policy, PolicyModel):
        return policy.action_table(mdp.n_states)
    return np.asarray(policy, dtype=float)


def eard_exact_tabular(mdp: TabularMdp, pi_t, pi1, pi2) -> float:
    """
    sum_s d(s) sum_a pi_t(a|s) |pi1(a|s)/pi2(a|s) - 1| where d is the normalized
    undiscounted occupancy of pi_t. Policies may be tabular models or (n_states, n_actions) tables.
    """
    table_t, table_1, table_2 = (_as_table(p, mdp) for p in (pi_t, pi1, pi2))
    d = occupancy(mdp, table_t, UNDISCOUNTED).normalized()
    total = []
    for s in mdp.non_terminal:
        if d[s] == 0.0:
            continue
        for a in range(mdp.n_actions):
            if table_t[s, a] == 0.0:
                continue
            if table_2[s, a] == 0.0:
                raise UndefinedRatioError(f"pi2({a}|{s}) = 0 where pi_t puts mass")
            total.append(d[s] * table_t[s, a] * abs(table_1[s, a] / table_2[s, a] - 1.0))
    return math.fsum(total)


# ---------------------------------------------------------------------------
# Bias spread
# ---------------------------------------------------------------------------

@dataclass
class BiasSpreadRecord:
    """One epoch of the bias spread; a distance is None when one of its two forks diverged."""
    epoch: int
    d1: float | None
    d2: float | None
    d_pct: float | None
    failed_forks: tuple = ()


def percentage_distance(d1: float, d2: float) -> float:
    """(d1 - d2) / (d1 + d2), 0 when both distances vanish."""
    if d1 + d2 < DEGENERATE_SPREAD:
        return 0.0
    return (d1 - d2) / (d1 + d2)


@dataclass(frozen=True)
class BiasSpreadSettings:
    """Hyperparameters shared by the four forks of one bias-spread step."""
    lr: float
    training: TrainingSettings = field(default_factory=TrainingSettings)
    alpha: float = 0.3
    baseline_algorithm: str = SGD
    correction_algorithm: str = RMSPROP
    correction_regularizer: str = REGULARIZER_KL
    optimizer_hyperparams: dict = field(default_factory=dict)
    probe_size: int = DEFAULT_PROBE_SIZE
    self_test: bool = False

    def fork_rules(self) -> dict[str, UpdateRule]:
        if self.self_test:
            same = UpdateRule(FORK_UNBIASED, spec_for(DISCOUNTED), self.baseline_algorithm)
            return {name: same for name in FORKS}
        corrected = self.correction_regularizer
        return {
            FORK_UNBIASED: UpdateRule(FORK_UNBIASED, spec_for(DISCOUNTED), self.baseline_algorithm),
            FORK_BIASED: UpdateRule(FORK_BIASED, spec_for(UNDISCOUNTED), self.baseline_algorithm),
            FORK_UNBIASED_CORRECTED: UpdateRule(FORK_UNBIASED_CORRECTED,
                                                spec_for(DISCOUNTED, corrected, self.alpha),
                                                self.correction_algorithm),
            FORK_BIASED_CORRECTED: UpdateRule(FORK_BIASED_CORRECTED,
                                              spec_for(UNDISCOUNTED, corrected, self.alpha),
                                              self.correction_algorithm),
        }


@dataclass
class BiasSpreadOutcome:
    record: BiasSpreadRecord
    forks: dict[str, EpochResult]
    clamped_ratios: int = 0
    failures: dict[str, str] = field(default_factory=dict)


def run_bias_spread_forks(baseline: PolicyModel, dataset: Sequence[Trajectory] | SampleBatch,
                          settings: BiasSpreadSettings, seed: int, *, epoch: int = 0,
                          baseline_state: OptimState | None = None, correction_state: OptimState | None = None,
                          mdp: TabularMdp | None = None) -> BiasSpreadOutcome:
    """
    Train the four one-epoch forks from `baseline` on the same dataset with identical seeds.

    The uncorrected forks start from a copy of `baseline_state`, the corrected ones from a
    copy of `correction_state`; missing states start fresh. A fork that diverges is left out of
    `forks` and reported in `failures`; the other three still train and are measured.
    """
    batch = dataset if isinstance(dataset, SampleBatch) else SampleBatch.from_trajectories(
        dataset, settings.training.gamma)
    rules = settings.fork_rules()
    forks, failures = {}, {}
    for name in FORKS:
        rule = rules[name]
        carried = baseline_state if name in (FORK_UNBIASED, FORK_BIASED) else correction_state
        if carried is not None and carried.algorithm == rule.algorithm:
            start_state = carried.copy()
        else:
            start_state = new_optim_state(rule.algorithm, baseline.n_params, settings.lr,
                                          **settings.optimizer_hyperparams)
        try:
            forks[name] = train_epoch(baseline, batch, rule, start_state, settings.lr, settings.training,
                                      np.random.default_rng(seed), mdp=mdp)
        except DivergenceError as e:
            failures[name] = str(e)
            logger.warning(f"bias spread epoch {epoch}: fork {name} diverged: {e}")

    probe = batch.probe()
    if len(probe) > settings.probe_size:
        keep = np.sort(np.random.default_rng(seed).choice(len(probe), settings.probe_size, replace=False))
        probe = [probe[i] for i in keep]
    corrected = _pair_eard(probe, forks, FORK_UNBIASED_CORRECTED, FORK_BIASED_CORRECTED)
    uncorrected = _pair_eard(probe, forks, FORK_UNBIASED, FORK_BIASED)
    d1 = None if corrected is None else corrected.value
    d2 = None if uncorrected is None else uncorrected.value
    d_pct = None if d1 is None or d2 is None else percentage_distance(d1, d2)
    record = BiasSpreadRecord(epoch=epoch, d1=d1, d2=d2, d_pct=d_pct,
                              failed_forks=tuple(name for name in FORKS if name in failures))
    logger.debug(f"bias spread epoch {epoch}: d1={d1} d2={d2} d%={d_pct}")
    clamped = sum(r.clamped_ratios for r in (corrected, uncorrected) if r is not None)
    return BiasSpreadOutcome(record=record, forks=forks, clamped_ratios=clamped, failures=failures)


def _pair_eard(pairs: list, forks: dict[str, EpochResult], first: str, second: str) -> EardResult | None:
    if first not in forks or second not in forks:
        return None
    return eard(pairs, forks[first].policy, forks[second].policy)


def bias_spread_step(baseline: PolicyModel, dataset: Sequence[Trajectory] | SampleBatch,
                     settings: BiasSpreadSettings, seed: int, **kwargs) -> BiasSpreadRecord:
    return run_bias_spread_forks(baseline, dataset, settings, seed, **kwargs).record


def sliding_window_mean(values: Sequence[float], window: int = SMOOTHING_WINDOW) -> list[float]:
    """
    Trailing mean over the last `window` values (fewer at the start of the series).
    None entries are skipped; a window holding only None gives None.
    """
    if window < 1:
        raise DomainError("window", window, ">= 1")
    values = list(values)
    means = []
    for i in range(len(values)):
        present = [v for v in values[max(0, i - window + 1):i + 1] if v is not None]
        means.append(math.fsum(present) / len(present) if present else None)
    return means


# ---------------------------------------------------------------------------
# Feature PCA
# ---------------------------------------------------------------------------

PCA_MAX_ITERATIONS = 10_000
PCA_TOLERANCE = 1e-13


@dataclass
class PcaResult:
    projected: np.ndarray
    components: np.ndarray
    explained: np.ndarray
    mean: np.ndarray

    def project(self, rows: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(rows) - self.mean) @ self.components.T


def _power_iteration(covariance: np.ndarray) -> tuple[np.ndarray, float]:
    column_norms = np.linalg.norm(covariance, axis=0)
    start = int(np.argmax(column_norms))
    if column_norms[start] <= DEGENERATE_SPREAD:
        return np.zeros(covariance.shape[0]), 0.0
    vector = covariance[:, start] / column_norms[start]
    for _ in range(PCA_MAX_ITERATIONS):
        image = covariance @ vector
        norm = np.linalg.norm(image)
        if norm <= DEGENERATE_SPREAD:
            return np.zeros_like(vector), 0.0
        updated = image / norm
        if np.linalg.norm(updated - vector) < PCA_TOLERANCE:
            vector = updated
            break
        vector = updated
    return vector, float(vector @ covariance @ vector)


def _orthogonal_complement(basis: np.ndarray) -> np.ndarray:
    """A unit vector orthogonal to `basis`, from the least aligned standard axis."""
    axis = np.zeros_like(basis)
    axis[int(np.argmin(np.abs(basis)))] = 1.0
    vector = axis - (axis @ basis) * basis
    return vector / np.linalg.norm(vector)


def _fix_sign(vector: np.ndarray) -> np.ndarray:
    return vector if vector[int(np.argmax(np.abs(vector)))] >= 0 else -vector


def pca_2d(features: np.ndarray) -> PcaResult:
    """Top-2 principal components by power iteration with deflation."""
    features = np.asarray(features, dtype=float)
    if features.ndim != 2 or features.shape[0] < 2 or features.shape[1] < 2:
        raise DegenerateInputError(f"PCA needs an n x d matrix with n, d >= 2, got shape {features.shape}")
    if not np.all(np.isfinite(features)):
        raise NonFiniteError("PCA features contain non-finite values")
    mean = features.mean(axis=0)
    centered = features - mean
    covariance = centered.T @ centered / (features.shape[0] - 1)
    if np.trace(covariance) <= DEGENERATE_SPREAD:
        raise DegenerateInputError("All feature rows are equal; no principal direction exists")

    first, first_var = _power_iteration(covariance)
    if first_var <= DEGENERATE_SPREAD:
        raise DegenerateInputError("Feature covariance has no dominant direction")
    first = _fix_sign(first / np.linalg.norm(first))
    deflated = covariance - first_var * np.outer(first, first)
    second, second_var = _power_iteration(deflated)
    if second_var <= DEGENERATE_SPREAD * max(first_var, 1.0):
        second, second_var = _orthogonal_complement(first), 0.0
    # Gram-Schmidt against the first component
    second = second - (second @ first) * first
    second = _fix_sign(second / np.linalg.norm(second))

    components = np.vstack([first, second])
    explained = np.array([first_var, max(second_var, 0.0)])
    return PcaResult(projected=centered @ components.T, components=components, explained=explained, mean=mean)


def action_correlation(projected: np.ndarray, actions: Sequence) -> tuple[float, float]:
    """Pearson correlation of each projected axis with the (scalar) action."""
    projected = np.asarray(projected, dtype=float)
    actions = np.asarray(actions, dtype=float)
    if actions.ndim == 2 and actions.shape[1] == 1:
        actions = actions[:, 0]
    if actions.ndim != 1 or projected.shape != (actions.size, 2):
        raise DomainError("projected/actions", (projected.shape, actions.shape), "(n, 2) and (n,)")
    if actions.size < 3:
        raise DomainError("n", actions.size, ">= 3")
    centered_actions = actions - actions.mean()
    action_norm = np.linalg.norm(centered_actions)
    result = []
    for axis in range(2):
        column = projected[:, axis] - projected[:, axis].mean()
        column_norm = np.linalg.norm(column)
        if action_norm <= DEGENERATE_SPREAD or column_norm <= DEGENERATE_SPREAD:
            raise UndefinedCorrelationError(f"Zero variance on axis {axis} or in the actions")
        result.append(float(np.clip(column @ centered_actions / (column_norm * action_norm), -1.0, 1.0)))
    return result[0], result[1]


def feature_matrix(policy: PolicyModel, states: Sequence, layer: int = 2) -> np.ndarray:
    return np.vstack([policy.features(s, layer) for s in states])


# ---------------------------------------------------------------------------
# Score model
# ---------------------------------------------------------------------------

SCORE_MODEL_LR = 1e-2
SCORE_MODEL_EPOCHS = 2000
# Divergence limit relative to a loss floor of 1 on standardized targets.
DIVERGENCE_FACTOR = 10.0


def _score_inputs(states: Sequence, actions: Sequence) -> np.ndarray:
    return np.vstack([np.concatenate([np.atleast_1d(np.asarray(s, dtype=float)),
                                      np.atleast_1d(np.asarray(a, dtype=float))])
                      for s, a in zip(states, actions)])


def _scale(values: np.ndarray) -> np.ndarray:
    scale = values.std(axis=0)
    return np.where(scale > 1e-8, scale, 1.0)


@dataclass
class ScoreModel:
    """Regression T(s, a) ~ return on standardized inputs and targets."""
    body: MlpBody
    params: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    target_mean: float
    target_scale: float
    final_mse: float = float("nan")

    def predict_inputs(self, inputs: np.ndarray) -> np.ndarray:
        _, out = self.body.forward_batch(self.params, (inputs - self.input_mean) / self.input_scale)
        return self.target_mean + self.target_scale * out[:, 0]

    def predict_batch(self, states: Sequence, actions: Sequence) -> np.ndarray:
        return self.predict_inputs(_score_inputs(states, actions))

    def predict(self, state, action) -> float:
        return float(self.predict_batch([state], [action])[0])


def fit_score_model(dataset: Sequence[tuple] | SampleBatch, epochs: int = SCORE_MODEL_EPOCHS, seed: int = 0,
                    lr: float = SCORE_MODEL_LR) -> ScoreModel:
    """
    Full-batch Adam regression of returns on (state, action).

    Args:
        dataset: (state, action, return) triples or a SampleBatch (its Monte Carlo returns).
    """
    if isinstance(dataset, SampleBatch):
        dataset = list(zip(dataset.states, dataset.actions, dataset.returns))
    if len(dataset) == 0:
        raise EmptyDatasetError("Score model needs at least one (state, action, return) triple")
    states, actions, returns = zip(*dataset)
    inputs = _score_inputs(states, actions)
    targets = np.asarray(returns, dtype=float)
    input_mean, input_scale = inputs.mean(axis=0), _scale(inputs)
    target_mean, target_scale = float(targets.mean()), float(_scale(targets))
    x = (inputs - input_mean) / input_scale
    y = (targets - target_mean) / target_scale

    rng = np.random.default_rng(seed)
    body = MlpBody(inputs.shape[1], 1)
    params = body.init_params(rng)
    state = new_optim_state(ADAM, body.n_params, lr)
    schedule = LrSchedule(lr, decay_factor=0.5, decay_every=max(1, epochs // 4))
    n = len(y)
    limit = None
    loss = float("nan")
    for epoch in range(epochs):
        cache, out = body.forward_batch(params, x)
        residual = out[:, 0] - y
        loss = float(np.mean(residual ** 2))
        if limit is None:
            limit = DIVERGENCE_FACTOR * max(loss, 1.0)
        elif not math.isfinite(loss) or loss > limit:
            raise DivergenceError(f"Score model loss {loss:.3g} exceeded {limit:.3g} at epoch {epoch}; "
                                  f"try a smaller learning rate than {lr}")
        gradient = body.backward_batch(params, cache, (2.0 / n) * residual[:, None])
        params, state = optimizer_step(state, params, -gradient, lr_at(schedule, epoch))

    _, out = body.forward_batch(params, x)
    model = ScoreModel(body=body, params=params, input_mean=input_mean, input_scale=input_scale,
                       target_mean=target_mean, target_scale=target_scale)
    model.final_mse = float(np.mean((model.predict_inputs(inputs) - targets) ** 2))
    logger.info(f"Score model fitted on {n} samples: final MSE {model.final_mse:.4g} (standardized {loss:.4g})")
    return model


# ---------------------------------------------------------------------------
# Loss surface
# ---------------------------------------------------------------------------

@dataclass
class LossSurface:
    grid: np.ndarray
    a_coords: np.ndarray
    b_coords: np.ndarray
    directions: tuple[np.ndarray, np.ndarray]
    center_loss: float

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(a), float(b), float(self.grid[i, j]))
                for i, a in enumerate(self.a_coords) for j, b in enumerate(self.b_coords)]


def filter_groups(policy: PolicyModel) -> list[np.ndarray]:
    """
    Parameter index groups rescaled together by filter normalization: one dense-layer
    output unit (weight row plus bias), one tabular state row, or the log-std vector.
    """
    body = getattr(policy, "body", None)
    if body is not None:
        groups = []
        for (w_slice, b_slice), (n_out, n_in) in zip(body.layer_slices, body.layer_shapes):
            for unit in range(n_out):
                row = np.arange(w_slice.start + unit * n_in, w_slice.start + (unit + 1) * n_in)
                groups.append(np.append(row, b_slice.start + unit))
        if policy.n_params > body.n_params:
            groups.append(np.arange(body.n_params, policy.n_params))
        return groups
    if policy.kind == TABULAR_SOFTMAX:
        return [np.arange(s * policy.n_actions, (s + 1) * policy.n_actions) for s in range(policy.n_states)]
    return [np.arange(policy.n_params)]


def filter_normalized_direction(policy: PolicyModel, rng: np.random.Generator) -> np.ndarray:
    params = policy.get_params()
    direction = rng.standard_normal(policy.n_params)
    for group in filter_groups(policy):
        direction[group] *= np.linalg.norm(params[group]) / (np.linalg.norm(direction[group]) + 1e-10)
    return direction


def _surface_loss(policy: PolicyModel, score_model: ScoreModel, states: Sequence, noise: np.ndarray,
                  regularized: bool, alpha: float) -> float:
    """-mean[T(s, a) (+ alpha log pi(a|s))] with actions reparameterized from fixed noise."""
    sample_states, sample_actions, log_probs = [], [], []
    for i, state in enumerate(states):
        if policy.is_discrete:
            probs = policy.action_probabilities(state)
            actions = [index_at(probs, u) for u in noise[i]]
        else:
            mean, std = policy.mean(state), np.exp(policy.log_std())
            actions = [mean + std * eps for eps in noise[i]]
        for action in actions:
            sample_states.append(state)
            sample_actions.append(action)
            log_probs.append(policy.log_prob(state, action))
    values = score_model.predict_batch(sample_states, sample_actions)
    if regularized:
        values = values + alpha * np.asarray(log_probs)
    return -math.fsum(values) / len(values)


def loss_surface(policy: PolicyModel, score_model: ScoreModel, states: Sequence, regularized: bool = False,
                 alpha: float = 0.3, grid_resolution: int = 11, seed: int = 0, n_action_samples: int = 4,
                 directions: tuple[np.ndarray, np.ndarray] | None = None) -> LossSurface:
    """
    Loss on the grid theta + a d1 + b d2 for (a, b) in [-1, 1]^2.

    Every cell reuses the same action noise, so the grid is a deterministic function of
    (theta, seed, resolution) and the centre cell equals the loss at theta.
    """
    if grid_resolution < 1 or grid_resolution % 2 == 0:
        raise DomainError("grid_resolution", grid_resolution, "an odd integer >= 1")
    if len(states) == 0:
        raise EmptyDatasetError("Loss surface needs at least one state")
    direction_seed, noise_seed = np.random.SeedSequence(seed).spawn(2)
    if directions is None:
        direction_rng = np.random.default_rng(direction_seed)
        directions = (filter_normalized_direction(policy, direction_rng),
                      filter_normalized_direction(policy, direction_rng))
    noise_rng = np.random.default_rng(noise_seed)
    if policy.is_discrete:
        noise = noise_rng.random((len(states), n_action_samples))
    else:
        noise = noise_rng.standard_normal((len(states), n_action_samples, policy.action_dim))

    coords = np.linspace(-1.0, 1.0, grid_resolution)
    coords[grid_resolution // 2] = 0.0
    theta = policy.get_params()
    grid = np.empty((grid_resolution, grid_resolution))
    for i, a in enumerate(coords):
        for j, b in enumerate(coords):
            shifted = policy.with_params(theta + a * directions[0] + b * directions[1])
            grid[i, j] = _surface_loss(shifted, score_model, states, noise, regularized, alpha)
    center_loss = _surface_loss(policy, score_model, states, noise, regularized, alpha)
    logger.info(f"Loss surface {grid_resolution}x{grid_resolution} done (centre {center_loss:.4g}, "
                f"range {grid.min():.4g}..{grid.max():.4g})")
    return LossSurface(grid=grid, a_coords=coords, b_coords=coords.copy(), directions=directions,
                       center_loss=center_loss)
