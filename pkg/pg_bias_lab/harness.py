# ABOUTME: This file orchestrates the experiments: performance, bias spread, off-policy perturbation and alias toy.
# ABOUTME: Each (variant, seed) runs as an isolated job with its own random streams; results are persisted via RunStore.
"""
Experiment orchestration.

Every job derives three independent random streams from its seed (policy init, rollouts,
minibatch draws), so two variants configured identically produce identical records and
results do not depend on the number of worker processes.
"""
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config_manager import ConfigManager, ExperimentConfig, ENV_ALIAS, ENV_CHAIN, ENV_PENDULUM
from .diagnostics import (FORK_BIASED, FORK_UNBIASED, BiasSpreadRecord, BiasSpreadSettings, action_correlation,
                          eard, eard_exact_tabular, feature_matrix, fit_score_model, loss_surface, pca_2d,
                          run_bias_spread_forks, sliding_window_mean)
from .estimator import REGULARIZER_KL, SampleBatch, scale_returns, spec_for
from .exceptions import ConfigError, DivergenceError, DomainError, LabException
from .mdp import (DISCOUNTED, UNDISCOUNTED, AliasMdp, PendulumEnv, TabularMdp, alias_fixed_points,
                  exact_return, make_chain_mdp, sample_episode)
from .optim import SGD, OptimState, lr_at, new_optim_state
from .policy import MLP_SOFTMAX, PolicyModel, TiedAliasPolicy, load_checkpoint, make_policy, policy_from_checkpoint
from .run_store import ALIAS_TOY_HEADER, PROJECTION_HEADER, SURFACE_HEADER, RunStore
from .trainer import EXACT, FULL_BATCH, TrainingSettings, UpdateRule, train_epoch

logger = logging.getLogger(__name__)

DISCRETE_TORQUES = (-2.0, 0.0, 2.0)
STATUS_OK = "ok"
STATUS_FAILED = "failed"


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def build_environment(config: ExperimentConfig) -> TabularMdp | PendulumEnv:
    if config.env == ENV_ALIAS:
        return AliasMdp(config.gamma).mdp
    if config.env == ENV_CHAIN:
        return make_chain_mdp(config.chain_length, config.gamma)
    if config.env == ENV_PENDULUM:
        torques = DISCRETE_TORQUES if config.policy_kind == MLP_SOFTMAX else None
        return PendulumEnv(max_steps=config.truncation, discrete_torques=torques)
    raise ConfigError(f"Unknown environment '{config.env}'")


def build_policy(config: ExperimentConfig, env, rng: np.random.Generator) -> PolicyModel:
    """
    Initialize the configured policy kind for `env`.

    Args:
        config: supplies `policy_kind` and, for the tied alias policy, `init_theta`.
        env: a TabularMdp or the PendulumEnv; fixes the state and action dimensions.
        rng: the seed's initialization stream.

    Returns:
        A fresh PolicyModel.

    Raises:
        UnsupportedPolicyKindError: for an unknown policy kind.
    """
    if isinstance(env, TabularMdp):
        return make_policy(config.policy_kind, rng, n_states=env.n_states, n_actions=env.n_actions,
                           init_theta=config.init_theta)
    return make_policy(config.policy_kind, rng, n_actions=env.n_actions, obs_dim=env.obs_dim,
                       action_dim=env.action_dim)


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent (init, rollout, train) generators derived from one seed."""
    return tuple(np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(3))


def build_variants(config: ExperimentConfig) -> list[UpdateRule]:
    """{unbiased, biased} x {baseline, experimental}."""
    rules = []
    for kind in ("baseline", "experimental"):
        for weighting, label in ((DISCOUNTED, "unbiased"), (UNDISCOUNTED, "biased")):
            if kind == "baseline":
                rules.append(UpdateRule(f"{label}_baseline", config.surrogate.to_spec(weighting, regularized=False),
                                        config.baseline_optimizer))
            else:
                rules.append(UpdateRule(f"{label}_experimental", config.surrogate.to_spec(weighting),
                                        config.optimizer.algorithm, config.lr_factor))
    return rules


@dataclass
class RunRecord:
    epoch: int
    mean_return: float
    exact_return: float | None
    lr_used: float
    eard: float | None
    clamped_ratios: int = 0
    wall_time: float = 0.0

    def to_row(self, with_wall_time: bool = False) -> list:
        row = [self.epoch, self.mean_return, self.exact_return, self.lr_used, self.eard, self.clamped_ratios]
        return row + [self.wall_time] if with_wall_time else row


@dataclass
class VariantResult:
    variant: str
    seed: int
    status: str = STATUS_OK
    records: list[RunRecord] = field(default_factory=list)
    checkpoint: dict | None = None
    optim_state: dict | None = None
    error: str | None = None
    wall_time: float = 0.0

    @property
    def key(self) -> str:
        return f"{self.variant}_{self.seed}"

    def final_policy(self) -> PolicyModel:
        return policy_from_checkpoint(self.checkpoint)


@dataclass(frozen=True)
class PerturbationSpec:
    """Entries whose state matches are drawn with relative weight `weight` when resampling."""
    coordinate: int = 0
    threshold: float = 0.01
    state_indices: frozenset | None = None
    weight: float = 5.0

    def __post_init__(self):
        if not self.weight >= 1.0:
            raise DomainError("weight", self.weight, ">= 1")

    def matches(self, state) -> bool:
        if self.state_indices is not None:
            return isinstance(state, (int, np.integer)) and int(state) in self.state_indices
        return abs(float(np.asarray(state, dtype=float).reshape(-1)[self.coordinate])) < self.threshold

    @classmethod
    def from_config(cls, config) -> "PerturbationSpec":
        indices = frozenset(config.state_indices) if config.state_indices is not None else None
        return cls(coordinate=config.coordinate, threshold=config.threshold, state_indices=indices,
                   weight=config.weight)


def perturbation_probabilities(states: Sequence, spec: PerturbationSpec) -> np.ndarray:
    weights = np.array([spec.weight if spec.matches(s) else 1.0 for s in states])
    return weights / weights.sum()


def perturbed_indices(states: Sequence, spec: PerturbationSpec, rng: np.random.Generator,
                      size: int | None = None) -> np.ndarray:
    """Indices drawn with replacement, matching states `weight` times as likely as the rest."""
    size = len(states) if size is None else size
    return rng.choice(len(states), size=size, replace=True, p=perturbation_probabilities(states, spec))


def perturb_dataset(dataset: SampleBatch, spec: PerturbationSpec, rng: np.random.Generator) -> SampleBatch:
    """Resample the batch to its own size under the perturbed state distribution."""
    indices = perturbed_indices(dataset.states, spec, rng)
    matched = sum(spec.matches(dataset.states[i]) for i in indices)
    logger.debug(f"Perturbed batch: {matched}/{len(indices)} draws from matching states")
    return dataset.subset(indices)


def _collect(config: ExperimentConfig, env, policy: PolicyModel, rng: np.random.Generator,
             scaled: bool = True) -> tuple[SampleBatch, float]:
    """One epoch of episodes as a SampleBatch (returns scaled per config unless `scaled` is False)."""
    trajectories = [sample_episode(env, policy, rng, config.truncation) for _ in range(config.episodes_per_epoch)]
    batch = SampleBatch.from_trajectories(trajectories, config.gamma)
    if scaled:
        batch = scale_returns(batch, config.training.return_scaling)
    return batch, batch.mean_total_reward


def _exact_return(env, policy: PolicyModel) -> float | None:
    if isinstance(env, TabularMdp):
        return exact_return(env, policy.action_table(env.n_states))
    return None


def _movement(env, batch: SampleBatch | None, before: PolicyModel, after: PolicyModel, probe_size: int) -> float:
    """EARD(pi_{t+1}, pi_t): on the epoch's own samples, or exactly in exact mode."""
    if batch is None:
        return eard_exact_tabular(env, before, after, before)
    return eard(batch.probe()[:probe_size], after, before).value


# ---------------------------------------------------------------------------
# Jobs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VariantJob:
    config: ExperimentConfig
    rule: UpdateRule
    seed: int
    perturbation: PerturbationSpec | None = None


def train_variant(config: ExperimentConfig, rule: UpdateRule, seed: int,
                  perturbation: PerturbationSpec | None = None) -> VariantResult:
    """Train one variant for `config.epochs` epochs, recording one RunRecord per epoch."""
    started = time.perf_counter()
    init_rng, rollout_rng, train_rng = seed_streams(seed)
    env = build_environment(config)
    policy = build_policy(config, env, init_rng)
    schedule = config.schedule.to_schedule()
    settings = config.training_settings()
    state = new_optim_state(rule.algorithm, policy.n_params, schedule.base_lr, **config.optimizer.hyperparams())
    result = VariantResult(variant=rule.name, seed=seed)
    logger.info(f"Variant {rule.name} (seed {seed}) started: {rule.spec.describe()} with {rule.algorithm}")

    try:
        for epoch in range(config.epochs):
            epoch_start = time.perf_counter()
            lr = lr_at(schedule, epoch)
            exact = _exact_return(env, policy)
            if settings.mode == EXACT:
                batch, mean_return = None, exact
            else:
                batch, mean_return = _collect(config, env, policy, rollout_rng)
                if perturbation is not None:
                    batch = perturb_dataset(batch, perturbation, rollout_rng)
            outcome = train_epoch(policy, batch, rule, state, lr, settings, train_rng,
                                  mdp=env if isinstance(env, TabularMdp) else None)
            movement = _movement(env, batch, policy, outcome.policy, config.probe_size)
            result.records.append(RunRecord(epoch=epoch, mean_return=mean_return, exact_return=exact,
                                            lr_used=outcome.lr_used, eard=movement,
                                            clamped_ratios=outcome.clamped_ratios,
                                            wall_time=time.perf_counter() - epoch_start))
            logger.debug(f"{rule.name} seed {seed} epoch {epoch}: return {mean_return:.4g}, eard {movement:.3g}")
            policy, state = outcome.policy, outcome.optim_state
    except LabException as e:
        result.status = STATUS_FAILED
        result.error = f"{type(e).__name__}: {e}"
        logger.warning(f"Variant {rule.name} (seed {seed}) failed at epoch {len(result.records)}: {e}")

    result.checkpoint = policy.to_checkpoint()
    result.optim_state = state.to_dict()
    result.wall_time = time.perf_counter() - started
    logger.info(f"Variant {rule.name} (seed {seed}) finished with status {result.status} "
                f"in {result.wall_time:.1f}s")
    return result


def _run_variant_job(job: VariantJob) -> VariantResult:
    return train_variant(job.config, job.rule, job.seed, job.perturbation)


def run_jobs(function, jobs: Sequence, workers: int = 1) -> list:
    """Map `function` over `jobs` in order, on a process pool when workers > 1."""
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(function, jobs))
    return [function(job) for job in jobs]


@dataclass
class ExperimentResult:
    command: str
    results: list[VariantResult]

    def variants(self) -> list[str]:
        return list(dict.fromkeys(r.variant for r in self.results))

    def for_variant(self, variant: str) -> list[VariantResult]:
        return [r for r in self.results if r.variant == variant]

    def statuses(self) -> dict[str, str]:
        return {r.key: r.status for r in self.results}

    def all_failed(self) -> bool:
        return all(r.status == STATUS_FAILED for r in self.results)

    def curves(self, attribute: str = "mean_return") -> dict[str, list[list[float]]]:
        return {v: [[getattr(rec, attribute) for rec in r.records] for r in self.for_variant(v) if r.records]
                for v in self.variants()}

    def final_returns(self, variant: str, tail_fraction: float = 0.25) -> dict[int, float]:
        """Per seed, mean return over the last `tail_fraction` of the recorded epochs (ok runs only)."""
        finals = {}
        for r in self.for_variant(variant):
            if r.status == STATUS_OK and r.records:
                tail = r.records[-max(1, int(len(r.records) * tail_fraction)):]
                finals[r.seed] = math.fsum(rec.mean_return for rec in tail) / len(tail)
        return finals


@dataclass
class SignTest:
    """Seed-wise comparison: `wins` of `n` paired seeds where the first variant did at least as well."""
    wins: int
    n: int
    p_value: float

    def to_dict(self) -> dict:
        return {"wins": self.wins, "n": self.n, "p_value": self.p_value}


def seedwise_sign_test(first: dict[int, float], second: dict[int, float]) -> SignTest:
    """One-sided binomial sign test of first >= second over the seeds both dicts contain."""
    seeds = sorted(set(first) & set(second))
    wins = sum(first[s] >= second[s] for s in seeds)
    n = len(seeds)
    p_value = math.fsum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n if n else 1.0
    return SignTest(wins=wins, n=n, p_value=p_value)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _write_plot(writer, *args) -> None:
    try:
        writer(*args)
    except Exception as e:
        logger.error(f"Plot {args[0]} could not be written: {e}")


def persist_experiment(store: RunStore, config: ExperimentConfig, experiment: ExperimentResult,
                       extra: dict | None = None) -> None:
    for result in experiment.results:
        store.write_metrics(result.variant, result.seed,
                            [rec.to_row(config.record_wall_time) for rec in result.records],
                            with_wall_time=config.record_wall_time)
        store.write_checkpoint(result.variant, result.seed, result.final_policy(),
                               None if result.optim_state is None else OptimState.from_dict(result.optim_state))
    if config.plots:
        from .plotting import write_curves_svg
        curves = {k: v for k, v in experiment.curves().items() if v}
        if curves:
            _write_plot(write_curves_svg, store.plot_path(f"{experiment.command}_returns.svg"), curves,
                        f"{experiment.command} ({config.env})")
    manager = ConfigManager(config)
    labels = {"directional_only": config.env == ENV_PENDULUM,
              "wall_time_total": sum(r.wall_time for r in experiment.results)}
    store.write_manifest(experiment.command, manager.to_dict(), manager.config_hash(), config.seeds,
                         variants=experiment.statuses(), extra={**labels, **(extra or {})})


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def run_performance(config: ExperimentConfig, store: RunStore | None = None) -> ExperimentResult:
    """Train the four {biased, unbiased} x {baseline, experimental} variants for every seed."""
    jobs = [VariantJob(config, rule, seed) for seed in config.seeds for rule in build_variants(config)]
    logger.info(f"Performance experiment: {len(jobs)} jobs on {config.workers} worker(s)")
    experiment = ExperimentResult("run-performance", run_jobs(_run_variant_job, jobs, config.workers))
    if store is not None:
        persist_experiment(store, config, experiment)
    return experiment


def offpolicy_variants(config: ExperimentConfig) -> list[UpdateRule]:
    """Uncorrected vs corrected training under the configured state weighting."""
    return [
        UpdateRule("uncorrected", config.surrogate.to_spec(regularized=False), config.baseline_optimizer),
        UpdateRule("corrected", config.surrogate.to_spec(), config.optimizer.algorithm, config.lr_factor),
    ]


def run_offpolicy(config: ExperimentConfig, store: RunStore | None = None) -> ExperimentResult:
    """Performance experiment where every epoch batch is resampled under a perturbed state distribution."""
    if config.perturbation is None:
        raise ConfigError("run-offpolicy needs a 'perturbation' section in the configuration")
    spec = PerturbationSpec.from_config(config.perturbation)
    jobs = [VariantJob(config, rule, seed, spec) for seed in config.seeds for rule in offpolicy_variants(config)]
    logger.info(f"Off-policy experiment: weight {spec.weight}, {len(jobs)} jobs")
    experiment = ExperimentResult("run-offpolicy", run_jobs(_run_variant_job, jobs, config.workers))
    test = seedwise_sign_test(experiment.final_returns("corrected"), experiment.final_returns("uncorrected"))
    logger.info(f"Off-policy: corrected >= uncorrected on {test.wins} of {test.n} seeds (p = {test.p_value:.3g})")
    if store is not None:
        persist_experiment(store, config, experiment, extra={"sign_test": test.to_dict()})
    return experiment


@dataclass
class BiasSpreadSeedResult:
    seed: int
    records: list[BiasSpreadRecord]
    baseline: VariantResult

    def smoothed(self, window: int = 5) -> tuple[list[float], list[float], list[float]]:
        return (sliding_window_mean([r.d1 for r in self.records], window),
                sliding_window_mean([r.d2 for r in self.records], window),
                sliding_window_mean([r.d_pct for r in self.records], window))

    def rows(self) -> list[list]:
        d1s, d2s, dps = self.smoothed()
        return [[r.epoch, r.d1, r.d2, r.d_pct, a, b, c] for r, a, b, c in zip(self.records, d1s, d2s, dps)]


def bias_spread_settings(config: ExperimentConfig, lr: float) -> BiasSpreadSettings:
    surrogate = config.surrogate
    coefficient = surrogate.alpha if surrogate.regularizer == REGULARIZER_KL else surrogate.beta
    return BiasSpreadSettings(lr=lr, training=config.training_settings(), alpha=coefficient,
                              baseline_algorithm=config.baseline_optimizer,
                              correction_algorithm=config.optimizer.algorithm,
                              correction_regularizer=surrogate.regularizer,
                              optimizer_hyperparams=config.optimizer.hyperparams(),
                              probe_size=config.probe_size, self_test=config.self_test)


def bias_spread_seed(config: ExperimentConfig, seed: int) -> BiasSpreadSeedResult:
    """Baseline training where every epoch also runs the four-fork bias-spread measurement."""
    started = time.perf_counter()
    init_rng, rollout_rng, train_rng = seed_streams(seed)
    env = build_environment(config)
    policy = build_policy(config, env, init_rng)
    schedule = config.schedule.to_schedule()
    mdp = env if isinstance(env, TabularMdp) else None
    side = FORK_BIASED if config.continue_with.startswith(FORK_BIASED) else FORK_UNBIASED
    baseline_state = correction_state = None
    baseline = VariantResult(variant=f"baseline_{config.continue_with}", seed=seed)
    records = []

    try:
        for epoch in range(config.epochs):
            epoch_start = time.perf_counter()
            lr = lr_at(schedule, epoch)
            exact = _exact_return(env, policy)
            batch, mean_return = _collect(config, env, policy, rollout_rng)
            fork_seed = int(train_rng.integers(2 ** 31 - 1))
            outcome = run_bias_spread_forks(policy, batch, bias_spread_settings(config, lr), fork_seed,
                                            epoch=epoch, baseline_state=baseline_state,
                                            correction_state=correction_state, mdp=mdp)
            records.append(outcome.record)
            if config.continue_with not in outcome.forks:
                raise DivergenceError(f"continuation fork {config.continue_with} diverged at epoch {epoch}: "
                                      f"{outcome.failures[config.continue_with]}")
            chosen = outcome.forks[config.continue_with]
            if side in outcome.forks:
                baseline_state = outcome.forks[side].optim_state
            if f"{side}_corrected" in outcome.forks:
                correction_state = outcome.forks[f"{side}_corrected"].optim_state
            movement = _movement(env, batch, policy, chosen.policy, config.probe_size)
            baseline.records.append(RunRecord(epoch=epoch, mean_return=mean_return, exact_return=exact,
                                              lr_used=chosen.lr_used, eard=movement,
                                              clamped_ratios=outcome.clamped_ratios,
                                              wall_time=time.perf_counter() - epoch_start))
            policy = chosen.policy
    except LabException as e:
        baseline.status = STATUS_FAILED
        baseline.error = f"{type(e).__name__}: {e}"
        logger.warning(f"Bias spread (seed {seed}) failed at epoch {len(records)}: {e}")

    baseline.checkpoint = policy.to_checkpoint()
    baseline.wall_time = time.perf_counter() - started
    logger.info(f"Bias spread (seed {seed}) finished: {len(records)} epochs, status {baseline.status}")
    return BiasSpreadSeedResult(seed=seed, records=records, baseline=baseline)


def _run_bias_spread_job(job: tuple[ExperimentConfig, int]) -> BiasSpreadSeedResult:
    return bias_spread_seed(*job)


@dataclass
class BiasSpreadResult:
    seeds: list[BiasSpreadSeedResult]

    def failed_seeds(self) -> list[int]:
        return [s.seed for s in self.seeds if s.baseline.status == STATUS_FAILED]

    def all_failed(self) -> bool:
        return len(self.failed_seeds()) == len(self.seeds)

    def failed_fork_epochs(self) -> int:
        return sum(1 for s in self.seeds for r in s.records if r.failed_forks)

    def mean_d_pct(self) -> float | None:
        """Mean d% over every measured epoch of every seed; None when nothing was measured."""
        values = [r.d_pct for s in self.seeds for r in s.records if r.d_pct is not None]
        return math.fsum(values) / len(values) if values else None

    def summary(self) -> dict:
        return {"mean_d_pct": self.mean_d_pct(), "failed_seeds": self.failed_seeds(),
                "failed_fork_epochs": self.failed_fork_epochs()}


def run_bias_spread(config: ExperimentConfig, store: RunStore | None = None) -> BiasSpreadResult:
    jobs = [(config, seed) for seed in config.seeds]
    result = BiasSpreadResult(run_jobs(_run_bias_spread_job, jobs, config.workers))
    mean = result.mean_d_pct()
    if mean is None:
        logger.error(f"Bias spread: no epoch was measured ({len(result.failed_seeds())} of {len(jobs)} seeds failed)")
    else:
        logger.info(f"Bias spread: mean d% over all epochs and seeds {mean:+.4f}; "
                    f"{len(result.failed_seeds())} of {len(jobs)} seed(s) failed, "
                    f"{result.failed_fork_epochs()} epoch(s) with a diverged fork")
    if store is not None:
        for seed_result in result.seeds:
            store.write_bias_spread(seed_result.seed, seed_result.rows())
        experiment = ExperimentResult("run-bias-spread", [s.baseline for s in result.seeds])
        persist_experiment(store, config, experiment, extra=result.summary())
        if config.plots:
            from .plotting import write_curves_svg
            complete = [s for s in result.seeds if s.records and not any(r.failed_forks for r in s.records)]
            series = {name: [list(s.smoothed()[index]) for s in complete]
                      for index, name in enumerate(("d1", "d2", "d_pct"))}
            series = {name: curves for name, curves in series.items() if curves}
            if series:
                _write_plot(write_curves_svg, store.plot_path("bias_spread.svg"), series,
                            f"bias spread ({config.env}, 5-epoch mean)", "epoch", "EARD / d%")
    return result


# ---------------------------------------------------------------------------
# Alias toy
# ---------------------------------------------------------------------------

ALIAS_EXACT = "exact"
ALIAS_MONTE_CARLO = "mc"


@dataclass
class AliasToyRow:
    gamma: float
    mode: str
    measured_unbiased: float
    measured_biased: float
    predicted_unbiased: float
    predicted_biased: float
    measured_ratio: float
    predicted_ratio: float

    def to_row(self) -> list:
        return [self.gamma, self.mode, self.measured_unbiased, self.measured_biased, self.predicted_unbiased,
                self.predicted_biased, self.measured_ratio, self.predicted_ratio]


@dataclass(frozen=True)
class AliasToySettings:
    init_theta: float = 0.2
    exact_epochs: int = 2000
    exact_lr: float = 0.5
    mc_epochs: int = 300
    mc_lr: float = 0.1
    episodes: int = 200
    seeds: tuple = (0, 1, 2)


def alias_theta_trace(gamma: float, weighting: str, mode: str, settings: AliasToySettings,
                      seed: int = 0) -> list[float]:
    """theta after every epoch of tied-alias projected gradient ascent with SGD."""
    alias = AliasMdp(gamma)
    policy = TiedAliasPolicy(theta=settings.init_theta)
    rule = UpdateRule(weighting, spec_for(weighting), SGD)
    exact = mode == ALIAS_EXACT
    lr = settings.exact_lr if exact else settings.mc_lr
    epochs = settings.exact_epochs if exact else settings.mc_epochs
    training = TrainingSettings(mode=EXACT if exact else FULL_BATCH, gamma=gamma)
    state = new_optim_state(SGD, 1, lr)
    _, rollout_rng, train_rng = seed_streams(seed)
    trace = []
    for _ in range(epochs):
        batch = None
        if not exact:
            batch = SampleBatch.from_trajectories(
                [sample_episode(alias.mdp, policy, rollout_rng) for _ in range(settings.episodes)], gamma)
        outcome = train_epoch(policy, batch, rule, state, lr, training, train_rng, mdp=alias.mdp)
        policy, state = outcome.policy, outcome.optim_state
        trace.append(policy.theta)
    return trace


def measured_fixed_point(trace: Sequence[float], mode: str) -> float:
    """Final iterate in exact mode; mean over the last quarter of epochs under sampling noise."""
    if mode == ALIAS_EXACT:
        return float(trace[-1])
    tail = trace[-max(1, len(trace) // 4):]
    return float(np.mean(tail))


def run_alias_toy(gamma_list: Sequence[float] = (0.3, 0.5, 0.7, 0.9), modes: Sequence[str] = (ALIAS_EXACT,),
                  settings: AliasToySettings = AliasToySettings(),
                  store: RunStore | None = None) -> list[AliasToyRow]:
    """Measured vs predicted unbiased/biased fixed points and return ratio per gamma."""
    rows = []
    for gamma in gamma_list:
        predicted = alias_fixed_points(gamma)
        alias = AliasMdp(gamma)
        for mode in modes:
            if mode not in (ALIAS_EXACT, ALIAS_MONTE_CARLO):
                raise DomainError("mode", mode, f"'{ALIAS_EXACT}' or '{ALIAS_MONTE_CARLO}'")
            seeds = (0,) if mode == ALIAS_EXACT else settings.seeds
            measured = {}
            for weighting in (DISCOUNTED, UNDISCOUNTED):
                points = [measured_fixed_point(alias_theta_trace(gamma, weighting, mode, settings, seed), mode)
                          for seed in seeds]
                measured[weighting] = float(np.mean(points))
            unbiased, biased = measured[DISCOUNTED], measured[UNDISCOUNTED]
            ratio = alias.return_of(biased, biased) / alias.return_of(unbiased, unbiased)
            rows.append(AliasToyRow(gamma=gamma, mode=mode, measured_unbiased=unbiased, measured_biased=biased,
                                    predicted_unbiased=predicted.unbiased, predicted_biased=predicted.biased,
                                    measured_ratio=ratio, predicted_ratio=predicted.decay_ratio))
            logger.info(f"alias toy gamma={gamma} ({mode}): theta* unbiased {unbiased:.4f} "
                        f"(pred {predicted.unbiased}), biased {biased:.4f} (pred {predicted.biased:.4f}), "
                        f"ratio {ratio:.4f} (pred {predicted.decay_ratio:.4f})")
    if store is not None:
        store.write_csv("alias_toy.csv", ALIAS_TOY_HEADER, [row.to_row() for row in rows])
    return rows


# ---------------------------------------------------------------------------
# Diagnostics commands
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticContext:
    """A policy plus one batch of its own rollouts, the input of every diagnostic command."""
    config: ExperimentConfig
    env: object
    policy: PolicyModel
    batch: SampleBatch


def diagnostic_context(config: ExperimentConfig, checkpoint: str | None = None) -> DiagnosticContext:
    """Load `checkpoint` (or initialize from the first seed) and roll out one epoch of episodes."""
    seed = config.seeds[0]
    init_rng, rollout_rng, _ = seed_streams(seed)
    env = build_environment(config)
    policy = load_checkpoint(checkpoint) if checkpoint else build_policy(config, env, init_rng)
    batch, _ = _collect(config, env, policy, rollout_rng, scaled=False)
    logger.info(f"Diagnostics on {policy.kind} policy with {len(batch)} samples from "
                f"{batch.n_trajectories} episodes")
    return DiagnosticContext(config=config, env=env, policy=policy, batch=batch)


def _subsample(values: list, limit: int, seed: int) -> list:
    if len(values) <= limit:
        return values
    keep = np.sort(np.random.default_rng(seed).choice(len(values), limit, replace=False))
    return [values[i] for i in keep]


def run_loss_surface(context: DiagnosticContext, store: RunStore | None = None, grid_resolution: int = 11,
                     n_states: int = 200, score_epochs: int = 2000):
    """Fit a score model on the context batch, then grid the plain and regularized losses."""
    seed = context.config.seeds[0]
    alpha = context.config.surrogate.alpha
    score_model = fit_score_model(context.batch, epochs=score_epochs, seed=seed)
    states = _subsample(context.batch.states, n_states, seed)
    plain = loss_surface(context.policy, score_model, states, grid_resolution=grid_resolution, seed=seed)
    regularized = loss_surface(context.policy, score_model, states, regularized=True, alpha=alpha,
                               grid_resolution=grid_resolution, seed=seed, directions=plain.directions)
    if store is not None:
        store.write_csv("loss_surface.csv", SURFACE_HEADER, plain.rows())
        store.write_csv("loss_surface_regularized.csv", SURFACE_HEADER, regularized.rows())
        if context.config.plots:
            from .plotting import write_surface_svg
            _write_plot(write_surface_svg, store.plot_path("loss_surface.svg"), plain.grid, plain.a_coords,
                        plain.b_coords, "loss surface")
            _write_plot(write_surface_svg, store.plot_path("loss_surface_regularized.svg"), regularized.grid,
                        regularized.a_coords, regularized.b_coords, f"regularized loss surface (alpha={alpha})")
    return plain, regularized, score_model


def run_feature_pca(context: DiagnosticContext, store: RunStore | None = None, layer: int = 2,
                    n_states: int = 2000):
    """Project hidden-layer features of visited states onto two principal axes and correlate with actions."""
    seed = context.config.seeds[0]
    pairs = _subsample(context.batch.probe(), n_states, seed)
    states = [s for s, _ in pairs]
    actions = np.array([np.asarray(a, dtype=float).reshape(-1)[0] for _, a in pairs])
    pca = pca_2d(feature_matrix(context.policy, states, layer))
    correlation = action_correlation(pca.projected, actions)
    logger.info(f"Feature PCA (layer {layer}): explained variance {pca.explained[0]:.4g}, "
                f"{pca.explained[1]:.4g}; action correlation {correlation[0]:+.3f}, {correlation[1]:+.3f}")
    if store is not None:
        store.write_csv("feature_projection.csv", PROJECTION_HEADER,
                        [(float(x), float(y), float(a)) for (x, y), a in zip(pca.projected, actions)])
        if context.config.plots:
            from .plotting import write_scatter_svg
            _write_plot(write_scatter_svg, store.plot_path("feature_pca.svg"), pca.projected, actions,
                        f"layer {layer} features ({context.policy.kind})")
    return pca, correlation
