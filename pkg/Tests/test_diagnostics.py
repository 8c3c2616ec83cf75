# ABOUTME: This file contains unit tests for the diagnostics: EARD, the bias-spread forks, feature PCA, score model and loss surface.
# ABOUTME: Exact cases are hand-computed; sampled estimators are compared with their exact counterparts.
import math

import numpy as np
import pytest

from pg_bias_lab.diagnostics import (FORK_BIASED, FORK_UNBIASED, FORKS, BiasSpreadSettings, action_correlation,
                                     bias_spread_step, eard, eard_exact_tabular, feature_matrix, filter_groups,
                                     filter_normalized_direction, fit_score_model, loss_surface, pca_2d,
                                     percentage_distance, run_bias_spread_forks, sliding_window_mean)
from pg_bias_lab.estimator import SampleBatch
from pg_bias_lab.exceptions import (DegenerateInputError, DivergenceError, DomainError, EmptyDatasetError,
                                    UndefinedCorrelationError, UndefinedRatioError)
from pg_bias_lab.mdp import PendulumEnv, make_single_state_mdp, sample_episode
from pg_bias_lab.optim import RMSPROP, SGD
from pg_bias_lab.policy import MlpGaussianPolicy, MlpSoftmaxPolicy, TabularSoftmaxPolicy, TiedAliasPolicy
from pg_bias_lab.trainer import FULL_BATCH, TrainingSettings
from pg_bias_lab.trainer import train_epoch as real_train_epoch


def _tabular(probs):
    """Single-state tabular policy (plus terminal row) with the given action probabilities."""
    n = len(probs)
    return TabularSoftmaxPolicy(2, n, params=np.concatenate([np.log(probs), np.zeros(n)]))


# EARD

def test_eard_identity_is_zero(rng):
    policy = MlpSoftmaxPolicy(2, 3, rng=rng)
    probe = [(rng.normal(size=2), int(rng.integers(3))) for _ in range(50)]
    assert eard(probe, policy, policy).value == 0.0


def test_eard_exact_hand_computed_case():
    mdp = make_single_state_mdp(2)
    pi_t = np.array([[0.5, 0.5], [0.5, 0.5]])
    pi1 = np.array([[0.6, 0.4], [0.5, 0.5]])
    assert eard_exact_tabular(mdp, pi_t, pi1, pi_t) == pytest.approx(0.2, abs=1e-15)


def test_eard_exact_accepts_policy_models():
    mdp = make_single_state_mdp(3)
    value = eard_exact_tabular(mdp, _tabular([0.2, 0.3, 0.5]), _tabular([0.3, 0.3, 0.4]), _tabular([0.25, 0.25, 0.5]))
    assert value == pytest.approx(0.2, abs=1e-12)


def test_sampled_eard_matches_exact():
    mdp = make_single_state_mdp(3)
    pi_t, pi1, pi2 = _tabular([0.2, 0.3, 0.5]), _tabular([0.3, 0.3, 0.4]), _tabular([0.25, 0.25, 0.5])
    rng = np.random.default_rng(1)
    probe = [(0, pi_t.sample_action(0, rng)[0]) for _ in range(20000)]
    result = eard(probe, pi1, pi2)
    exact = eard_exact_tabular(mdp, pi_t, pi1, pi2)
    assert abs(result.value - exact) < 3 * result.standard_error
    assert result.n_samples == 20000


def test_eard_undefined_ratio():
    mdp = make_single_state_mdp(2)
    with pytest.raises(UndefinedRatioError):
        eard_exact_tabular(mdp, np.full((2, 2), 0.5), np.full((2, 2), 0.5), np.array([[1.0, 0.0], [0.5, 0.5]]))


def test_eard_empty_probe():
    with pytest.raises(EmptyDatasetError):
        eard([], TiedAliasPolicy(), TiedAliasPolicy())


def test_eard_clamps_extreme_ratios():
    near_zero = TiedAliasPolicy(theta=1e-6)
    result = eard([(0, 1)], TiedAliasPolicy(theta=1.0 - 1e-12), near_zero)
    assert result.clamped_ratios == 1
    assert result.value == pytest.approx(abs(math.exp(-20.0) - 1.0))


# Bias spread

def test_percentage_distance():
    assert percentage_distance(1.0, 3.0) == pytest.approx(-0.5)
    assert percentage_distance(0.0, 0.0) == 0.0
    assert percentage_distance(2.0, 0.0) == 1.0


def test_sliding_window_mean_is_trailing():
    assert sliding_window_mean([1, 2, 3, 4, 5, 6]) == pytest.approx([1.0, 1.5, 2.0, 2.5, 3.0, 4.0])
    assert sliding_window_mean([]) == []
    assert sliding_window_mean([None, 2.0, None, 4.0], window=2) == [None, 2.0, 2.0, 4.0]
    with pytest.raises(DomainError):
        sliding_window_mean([1.0], window=0)


def _alias_dataset(alias, policy, n=100, seed=0):
    rng = np.random.default_rng(seed)
    return [sample_episode(alias.mdp, policy, rng) for _ in range(n)]


def test_self_test_wiring_gives_zero_spread(alias):
    baseline = TiedAliasPolicy(theta=0.3)
    settings = BiasSpreadSettings(lr=0.1, training=TrainingSettings(mode=FULL_BATCH, gamma=0.9), self_test=True)
    record = bias_spread_step(baseline, _alias_dataset(alias, baseline), settings, seed=4)
    assert record.d1 == 0.0
    assert record.d2 == 0.0
    assert record.d_pct == 0.0


def test_alias_forks_spread_apart(alias):
    baseline = TiedAliasPolicy(theta=0.3)
    settings = BiasSpreadSettings(lr=0.1, training=TrainingSettings(mode=FULL_BATCH, gamma=0.9))
    outcome = run_bias_spread_forks(baseline, _alias_dataset(alias, baseline), settings, seed=4, epoch=3)
    assert set(outcome.forks) == set(FORKS)
    assert outcome.record.epoch == 3
    assert outcome.record.d2 > 0.0
    assert -1.0 <= outcome.record.d_pct <= 1.0
    assert outcome.forks[FORK_UNBIASED].policy.theta != outcome.forks[FORK_BIASED].policy.theta
    assert baseline.theta == 0.3


def test_forks_reuse_carried_optimizer_states(alias):
    baseline = TiedAliasPolicy(theta=0.3)
    settings = BiasSpreadSettings(lr=0.01, training=TrainingSettings(mode=FULL_BATCH, gamma=0.9),
                                  baseline_algorithm=SGD, correction_algorithm=RMSPROP)
    dataset = _alias_dataset(alias, baseline)
    first = run_bias_spread_forks(baseline, dataset, settings, seed=1)
    carried = first.forks["unbiased_corrected"].optim_state
    second = run_bias_spread_forks(baseline, dataset, settings, seed=1, correction_state=carried)
    assert second.forks["unbiased_corrected"].optim_state.step_count == 2
    assert carried.step_count == 1


def test_diverged_fork_leaves_the_other_pair_measured(alias, mocker):
    def biased_fork_diverges(policy, batch, rule, *args, **kwargs):
        if rule.name == FORK_BIASED:
            raise DivergenceError("biased: parameters became non-finite")
        return real_train_epoch(policy, batch, rule, *args, **kwargs)

    mocker.patch('pg_bias_lab.diagnostics.train_epoch', side_effect=biased_fork_diverges)
    baseline = TiedAliasPolicy(theta=0.3)
    settings = BiasSpreadSettings(lr=0.1, training=TrainingSettings(mode=FULL_BATCH, gamma=0.9))
    outcome = run_bias_spread_forks(baseline, _alias_dataset(alias, baseline), settings, seed=4, epoch=2)
    assert set(outcome.forks) == set(FORKS) - {FORK_BIASED}
    assert "non-finite" in outcome.failures[FORK_BIASED]
    assert outcome.record.failed_forks == (FORK_BIASED,)
    assert outcome.record.d1 is not None
    assert outcome.record.d2 is None
    assert outcome.record.d_pct is None


def test_bias_spread_is_deterministic(alias):
    baseline = TiedAliasPolicy(theta=0.3)
    batch = SampleBatch.from_trajectories(_alias_dataset(alias, baseline), 0.9)
    settings = BiasSpreadSettings(lr=0.05, training=TrainingSettings(mode=FULL_BATCH, gamma=0.9))
    assert bias_spread_step(baseline, batch, settings, 9) == bias_spread_step(baseline, batch, settings, 9)


# Feature PCA

def _rank_two_features(n=200, seed=0):
    rng = np.random.default_rng(seed)
    t = rng.normal(scale=3.0, size=n)
    t -= t.mean()
    s = rng.normal(scale=1.0, size=n)
    s -= s.mean()
    s -= (s @ t) / (t @ t) * t
    features = np.zeros((n, 4))
    features[:, 0] = t
    features[:, 1] = s
    return features, t, s


def test_pca_components_orthonormal():
    features = np.random.default_rng(2).normal(size=(300, 6)) @ np.random.default_rng(3).normal(size=(6, 6))
    result = pca_2d(features)
    np.testing.assert_allclose(result.components @ result.components.T, np.eye(2), atol=1e-8)
    assert result.explained[0] >= result.explained[1] >= 0.0
    assert result.projected.shape == (300, 2)
    np.testing.assert_allclose(result.project(features), result.projected, atol=1e-10)


def test_pca_recovers_dominant_axis_and_correlation_is_one():
    features, t, s = _rank_two_features()
    result = pca_2d(features)
    np.testing.assert_allclose(np.abs(result.components[0]), [1.0, 0.0, 0.0, 0.0], atol=1e-8)
    first, second = action_correlation(result.projected, t)
    assert abs(first) == pytest.approx(1.0, abs=1e-8)
    assert abs(action_correlation(result.projected, s)[1]) == pytest.approx(1.0, abs=1e-8)


def test_pca_ignores_a_constant_row_shift():
    features, _, _ = _rank_two_features()
    base = pca_2d(features)
    shifted = pca_2d(features + np.array([5.0, -3.0, 100.0, 7.0]))
    np.testing.assert_allclose(shifted.components, base.components, atol=1e-8)
    np.testing.assert_allclose(shifted.explained, base.explained, rtol=1e-9)
    np.testing.assert_allclose(shifted.projected, base.projected, atol=1e-8)


def test_pca_degenerate_inputs():
    with pytest.raises(DegenerateInputError):
        pca_2d(np.ones((10, 3)))
    with pytest.raises(DegenerateInputError):
        pca_2d(np.ones((1, 3)))


def test_action_correlation_errors():
    projected = np.random.default_rng(0).normal(size=(5, 2))
    with pytest.raises(UndefinedCorrelationError):
        action_correlation(projected, np.ones(5))
    with pytest.raises(DomainError):
        action_correlation(projected[:2], np.array([0.0, 1.0]))


def test_feature_matrix_from_policy(rng):
    policy = MlpGaussianPolicy(2, 1, rng=rng)
    states = [rng.normal(size=2) for _ in range(30)]
    assert feature_matrix(policy, states).shape == (30, 16)
    assert feature_matrix(policy, states, layer=1).shape == (30, 16)


# Score model

def _linear_triples(n, seed):
    rng = np.random.default_rng(seed)
    states = rng.uniform(-1.0, 1.0, size=(n, 2))
    actions = rng.uniform(-1.0, 1.0, size=(n, 1))
    targets = 2.0 * states[:, 0] - states[:, 1] + 0.5 * actions[:, 0]
    return list(zip(states, actions, targets)), targets


def test_score_model_fits_linear_target():
    triples, targets = _linear_triples(200, 0)
    model = fit_score_model(triples, epochs=600, seed=0)
    assert model.final_mse < 0.05 * targets.var()
    state, action, target = triples[0]
    assert model.predict(state, action) == pytest.approx(float(model.predict_batch([state], [action])[0]))


@pytest.mark.slow
def test_score_model_fits_linear_target_closely():
    triples, targets = _linear_triples(400, 1)
    model = fit_score_model(triples, epochs=3000, seed=0)
    assert model.final_mse < 0.01 * targets.var()


def test_score_model_divergence_and_empty_data():
    triples, _ = _linear_triples(50, 2)
    with pytest.raises(DivergenceError):
        fit_score_model(triples, epochs=50, lr=1e3)
    with pytest.raises(EmptyDatasetError):
        fit_score_model([])


# Loss surface

def _surface_inputs(seed=0):
    rng = np.random.default_rng(seed)
    env = PendulumEnv(max_steps=20)
    policy = MlpGaussianPolicy(2, 1, rng=rng)
    trajectories = [sample_episode(env, policy, rng) for _ in range(5)]
    batch = SampleBatch.from_trajectories(trajectories, 0.99)
    model = fit_score_model(batch, epochs=100, seed=0)
    return policy, model, batch.states[:20]


def test_loss_surface_centre_and_zero_alpha():
    policy, model, states = _surface_inputs()
    plain = loss_surface(policy, model, states, grid_resolution=5, seed=3, n_action_samples=2)
    assert plain.grid.shape == (5, 5)
    assert plain.grid[2, 2] == plain.center_loss
    zero_alpha = loss_surface(policy, model, states, regularized=True, alpha=0.0, grid_resolution=5, seed=3,
                              n_action_samples=2)
    np.testing.assert_array_equal(zero_alpha.grid, plain.grid)
    assert len(plain.rows()) == 25


def test_loss_surface_is_deterministic_and_rejects_even_grids():
    policy, model, states = _surface_inputs()
    first = loss_surface(policy, model, states, grid_resolution=3, seed=1, n_action_samples=2)
    second = loss_surface(policy, model, states, grid_resolution=3, seed=1, n_action_samples=2)
    np.testing.assert_array_equal(first.grid, second.grid)
    with pytest.raises(DomainError):
        loss_surface(policy, model, states, grid_resolution=4)


def test_filter_normalized_direction_matches_group_norms(rng):
    policy = MlpGaussianPolicy(2, 1, rng=rng)
    direction = filter_normalized_direction(policy, rng)
    params = policy.get_params()
    groups = filter_groups(policy)
    assert sum(len(g) for g in groups) == policy.n_params
    for group in groups[:-1]:
        assert np.linalg.norm(direction[group]) == pytest.approx(np.linalg.norm(params[group]), rel=1e-6)


def test_halving_the_learning_rate_shrinks_the_bias_spread(alias):
    baseline = TiedAliasPolicy(theta=0.3)
    batch = SampleBatch.from_trajectories(_alias_dataset(alias, baseline, n=200), 0.9)
    training = TrainingSettings(mode=FULL_BATCH, gamma=0.9)
    full = bias_spread_step(baseline, batch, BiasSpreadSettings(lr=0.02, training=training), 0)
    half = bias_spread_step(baseline, batch, BiasSpreadSettings(lr=0.01, training=training), 0)
    assert 0.0 < half.d2 < full.d2
