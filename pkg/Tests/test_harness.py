# ABOUTME: This file contains tests for experiment orchestration: variants, perturbation, job isolation and persistence.
# ABOUTME: Runs use tiny alias/chain/pendulum configurations so every experiment finishes in seconds.
import json
import os
import shutil
import tempfile
import unittest

import numpy as np
import pytest

from pg_bias_lab.config_manager import ENV_ALIAS, ENV_CHAIN, ENV_PENDULUM, PerturbationConfig, default_config
from pg_bias_lab.diagnostics import FORK_BIASED, FORK_UNBIASED
from pg_bias_lab.estimator import REGULARIZER_KL, REGULARIZER_NONE, SampleBatch
from pg_bias_lab.exceptions import ConfigError, DivergenceError, DomainError
from pg_bias_lab.harness import (ALIAS_EXACT, STATUS_FAILED, STATUS_OK, AliasToySettings, PerturbationSpec,
                                 build_variants, diagnostic_context, measured_fixed_point, offpolicy_variants,
                                 perturb_dataset, perturbation_probabilities, run_alias_toy, run_bias_spread,
                                 run_feature_pca, run_loss_surface, run_offpolicy, run_performance, seed_streams,
                                 seedwise_sign_test, train_variant)
from pg_bias_lab.mdp import ALIAS_S2, DISCOUNTED, UNDISCOUNTED, Step, Trajectory
from pg_bias_lab.optim import RMSPROP, SGD
from pg_bias_lab.run_store import RunStore
from pg_bias_lab.trainer import train_epoch as real_train_epoch


def _config(env=ENV_ALIAS, **overrides):
    config = default_config(env)
    config.epochs = 3
    config.episodes_per_epoch = 20
    config.seeds = [0]
    config.plots = False
    for key, value in overrides.items():
        setattr(config, key, value)
    return config


def _comparable(records):
    return [(r.epoch, r.mean_return, r.exact_return, r.lr_used, r.eard, r.clamped_ratios) for r in records]


def test_build_variants_cover_both_weightings_and_optimizers():
    rules = {rule.name: rule for rule in build_variants(_config())}
    assert list(rules) == ["unbiased_baseline", "biased_baseline", "unbiased_experimental", "biased_experimental"]
    assert rules["unbiased_baseline"].spec.state_weighting == DISCOUNTED
    assert rules["biased_baseline"].spec.state_weighting == UNDISCOUNTED
    assert rules["biased_baseline"].spec.regularizer == REGULARIZER_NONE
    assert rules["biased_baseline"].algorithm == SGD
    assert rules["biased_experimental"].spec.regularizer == REGULARIZER_KL
    assert rules["biased_experimental"].algorithm == RMSPROP


def test_seed_streams_are_reproducible():
    first = [g.random() for g in seed_streams(5)]
    second = [g.random() for g in seed_streams(5)]
    assert first == second
    assert len(set(first)) == 3


# Perturbation

def _batch(states):
    steps = [Step(state=s, action=0, reward=0.0, behavior_log_prob=0.0, timestep=k) for k, s in enumerate(states)]
    return SampleBatch.from_trajectories([Trajectory(steps=steps)], 0.9)


def test_unit_weight_leaves_distribution_uniform():
    probs = perturbation_probabilities([0, 1, 2, 3], PerturbationSpec(state_indices=frozenset({0}), weight=1.0))
    np.testing.assert_allclose(probs, [0.25] * 4)


def test_matching_states_are_upweighted():
    states = [0, 1, 0, 1]
    probs = perturbation_probabilities(states, PerturbationSpec(state_indices=frozenset({0}), weight=5.0))
    assert probs[0] + probs[2] == pytest.approx(5.0 / 6.0)


def test_threshold_predicate_on_continuous_states():
    spec = PerturbationSpec(coordinate=0, threshold=0.01)
    assert spec.matches(np.array([0.005, 3.0]))
    assert not spec.matches(np.array([-0.5, 0.0]))
    with pytest.raises(DomainError):
        PerturbationSpec(weight=0.5)


def test_perturb_dataset_keeps_size_and_favours_matches():
    batch = _batch([0, 1] * 500)
    resampled = perturb_dataset(batch, PerturbationSpec(state_indices=frozenset({0}), weight=5.0),
                                np.random.default_rng(0))
    assert len(resampled) == len(batch)
    share = np.mean([s == 0 for s in resampled.states])
    assert share == pytest.approx(5.0 / 6.0, abs=0.05)


# Jobs

def test_identical_variants_produce_identical_records():
    config = _config(ENV_CHAIN)
    rule = build_variants(config)[1]
    first = train_variant(config, rule, seed=3)
    second = train_variant(config, rule, seed=3)
    assert first.status == second.status == STATUS_OK
    assert len(first.records) == 3
    assert _comparable(first.records) == _comparable(second.records)
    np.testing.assert_array_equal(first.final_policy().get_params(), second.final_policy().get_params())


def test_failed_variant_keeps_its_error(mocker):
    mocker.patch('pg_bias_lab.harness.train_epoch', side_effect=DivergenceError("loss exploded"))
    config = _config()
    result = train_variant(config, build_variants(config)[0], seed=0)
    assert result.status == STATUS_FAILED
    assert result.records == []
    assert "DivergenceError" in result.error
    assert result.checkpoint is not None


def test_one_failing_variant_does_not_stop_the_others(mocker):
    def failing_for_biased_experimental(policy, batch, rule, *args, **kwargs):
        if rule.name == "biased_experimental":
            raise DivergenceError("boom")
        return real_train_epoch(policy, batch, rule, *args, **kwargs)

    mocker.patch('pg_bias_lab.harness.train_epoch', side_effect=failing_for_biased_experimental)
    statuses = run_performance(_config()).statuses()
    assert statuses.pop("biased_experimental_0") == STATUS_FAILED
    assert set(statuses.values()) == {STATUS_OK}


def _fork_diverges(name):
    def train(policy, batch, rule, *args, **kwargs):
        if rule.name == name:
            raise DivergenceError(f"{name}: parameters became non-finite")
        return real_train_epoch(policy, batch, rule, *args, **kwargs)
    return train


def test_bias_spread_keeps_training_when_a_side_fork_diverges(mocker):
    mocker.patch('pg_bias_lab.diagnostics.train_epoch', side_effect=_fork_diverges(FORK_BIASED))
    result = run_bias_spread(_config())
    seed_result = result.seeds[0]
    assert seed_result.baseline.status == STATUS_OK
    assert len(seed_result.records) == 3
    assert all(r.failed_forks == (FORK_BIASED,) and r.d2 is None for r in seed_result.records)
    assert result.mean_d_pct() is None
    assert result.summary() == {"mean_d_pct": None, "failed_seeds": [], "failed_fork_epochs": 3}
    assert not result.all_failed()


def test_bias_spread_seed_fails_with_its_continuation_fork(mocker):
    mocker.patch('pg_bias_lab.diagnostics.train_epoch', side_effect=_fork_diverges(FORK_UNBIASED))
    result = run_bias_spread(_config(seeds=[0, 1]))
    assert result.failed_seeds() == [0, 1]
    assert result.all_failed()
    assert "continuation fork unbiased" in result.seeds[0].baseline.error
    assert [len(s.records) for s in result.seeds] == [1, 1]


def test_pendulum_defaults_train_without_diverging():
    config = _config(ENV_PENDULUM, epochs=2, episodes_per_epoch=10)
    for rule in build_variants(config):
        result = train_variant(config, rule, seed=0)
        assert result.status == STATUS_OK, result.error
        assert np.all(np.isfinite(result.final_policy().get_params()))
    spread = run_bias_spread(config)
    assert spread.failed_seeds() == []
    assert spread.failed_fork_epochs() == 0
    assert spread.mean_d_pct() is not None


def test_seedwise_sign_test():
    test = seedwise_sign_test({0: 1.0, 1: 2.0, 2: -1.0, 3: 5.0}, {0: 0.5, 1: 2.0, 2: 0.0, 4: 9.0})
    assert (test.wins, test.n) == (2, 3)
    assert test.p_value == pytest.approx(4 / 8)
    assert seedwise_sign_test({0: 1.0}, {1: 1.0}).to_dict() == {"wins": 0, "n": 0, "p_value": 1.0}


def test_run_offpolicy_needs_perturbation():
    with pytest.raises(ConfigError):
        run_offpolicy(_config(ENV_CHAIN))


def test_alias_perturbation_on_second_state_pushes_biased_fixed_point_down():
    config = _config(epochs=150, episodes_per_epoch=200)
    rule = offpolicy_variants(config)[0]
    plain = train_variant(config, rule, seed=0).final_policy().theta
    spec = PerturbationSpec(state_indices=frozenset({ALIAS_S2}), weight=5.0)
    perturbed = train_variant(config, rule, seed=0, perturbation=spec).final_policy().theta
    assert plain == pytest.approx(0.9 / 1.9, abs=0.03)
    assert perturbed < 0.3
    assert abs(perturbed - 0.5) > abs(plain - 0.5)


# Alias toy

def test_alias_toy_exact_matches_predictions():
    rows = run_alias_toy((0.5, 0.9), settings=AliasToySettings(exact_epochs=400))
    assert [row.gamma for row in rows] == [0.5, 0.9]
    for row in rows:
        assert row.mode == ALIAS_EXACT
        assert row.measured_unbiased == pytest.approx(0.5, abs=1e-6)
        assert row.measured_biased == pytest.approx(row.gamma / (1.0 + row.gamma), abs=0.005)
        assert row.measured_ratio == pytest.approx(row.predicted_ratio, abs=1e-4)
    assert rows[1].predicted_ratio == pytest.approx(0.9972299, abs=1e-6)


def test_alias_toy_rejects_unknown_mode():
    with pytest.raises(DomainError):
        run_alias_toy((0.9,), modes=("analytic",))


def test_measured_fixed_point_modes():
    trace = [0.0, 0.0, 0.0, 1.0, 0.2, 0.4, 0.6, 0.8]
    assert measured_fixed_point(trace, ALIAS_EXACT) == 0.8
    assert measured_fixed_point(trace, "mc") == pytest.approx(0.7)


class TestPersistedExperiments(unittest.TestCase):

    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()
        self.store = RunStore(self.temp_dir)

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_run_performance_writes_metrics_checkpoints_and_manifest(self):
        config = _config(ENV_CHAIN)
        experiment = run_performance(config, self.store)
        self.assertEqual(len(experiment.results), 4)
        for variant in experiment.variants():
            rows = self.store.read_csv(f"metrics_{variant}_0.csv")
            self.assertEqual([row["epoch"] for row in rows], ["0", "1", "2"])
            self.assertTrue(os.path.exists(os.path.join(self.temp_dir, "checkpoints", f"{variant}_0.json")))
        manifest = self.store.load_manifest()
        self.assertEqual(manifest["command"], "run-performance")
        self.assertEqual(manifest["seeds"], [0])
        self.assertEqual(len(manifest["config_hash"]), 64)
        self.assertEqual(set(manifest["variants"].values()), {STATUS_OK})
        self.assertFalse(manifest["directional_only"])

    def test_offpolicy_run_with_perturbation(self):
        config = _config(ENV_CHAIN, perturbation=PerturbationConfig(state_indices=[0], weight=5.0))
        experiment = run_offpolicy(config, self.store)
        self.assertEqual(experiment.variants(), ["uncorrected", "corrected"])
        self.assertEqual(self.store.load_manifest()["command"], "run-offpolicy")
        self.assertEqual(self.store.load_manifest()["sign_test"]["n"], 1)

    def test_self_test_bias_spread_is_zero(self):
        config = _config(self_test=True)
        result = run_bias_spread(config, self.store)
        self.assertEqual([r.d_pct for r in result.seeds[0].records], [0.0, 0.0, 0.0])
        rows = self.store.read_csv("bias_spread_0.csv")
        self.assertEqual(len(rows), 3)
        self.assertEqual(self.store.load_manifest()["mean_d_pct"], 0.0)

    def test_bias_spread_baseline_is_recorded(self):
        result = run_bias_spread(_config(), self.store)
        seed_result = result.seeds[0]
        self.assertEqual(seed_result.baseline.variant, "baseline_unbiased")
        self.assertEqual(len(seed_result.baseline.records), 3)
        self.assertTrue(all(r.d2 > 0.0 for r in seed_result.records))
        self.assertTrue(os.path.exists(self.store.path("metrics_baseline_unbiased_0.csv")))

    def test_alias_toy_csv(self):
        run_alias_toy((0.9,), settings=AliasToySettings(exact_epochs=50), store=self.store)
        rows = self.store.read_csv("alias_toy.csv")
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0]["mode"], ALIAS_EXACT)

    def test_results_do_not_depend_on_worker_count(self):
        contents, hashes = [], []
        for workers in (1, 2, 4):
            store = RunStore(os.path.join(self.temp_dir, f"workers_{workers}"))
            config = _config(ENV_CHAIN, seeds=[0, 1], epochs=2, workers=workers)
            run_performance(config, store)
            with open(store.path("metrics_biased_experimental_1.csv"), "r", encoding="utf-8") as f:
                contents.append(f.read())
            with open(store.path("manifest.json"), "r", encoding="utf-8") as f:
                hashes.append(json.load(f)["config_hash"])
        self.assertEqual(contents[0], contents[1])
        self.assertEqual(contents[0], contents[2])
        self.assertEqual(len(set(hashes)), 1)

    def test_diagnostics_on_pendulum(self):
        config = _config(ENV_PENDULUM, episodes_per_epoch=2, truncation=30)
        context = diagnostic_context(config)
        self.assertEqual(len(context.batch), 60)
        pca, correlation = run_feature_pca(context, self.store)
        self.assertEqual(pca.projected.shape, (60, 2))
        self.assertTrue(all(-1.0 <= r <= 1.0 for r in correlation))
        plain, regularized, _ = run_loss_surface(context, self.store, grid_resolution=3, n_states=10,
                                                 score_epochs=20)
        self.assertEqual(len(self.store.read_csv("loss_surface.csv")), 9)
        self.assertEqual(len(self.store.read_csv("loss_surface_regularized.csv")), 9)
        np.testing.assert_array_equal(plain.directions[0], regularized.directions[0])


@pytest.mark.slow
def test_alias_toy_monte_carlo_matches_predictions():
    row = run_alias_toy((0.9,), modes=("mc",))[0]
    assert row.measured_unbiased == pytest.approx(0.5, abs=0.02)
    assert row.measured_biased == pytest.approx(0.9 / 1.9, abs=0.02)
    assert row.measured_ratio == pytest.approx(row.predicted_ratio, abs=0.02)


# Pendulum acceptance runs, five seeds each

def _pendulum(**overrides):
    return _config(ENV_PENDULUM, seeds=[0, 1, 2, 3, 4], **overrides)


@pytest.mark.slow
def test_pendulum_correction_narrows_bias_spread():
    result = run_bias_spread(_pendulum(epochs=10, episodes_per_epoch=10))
    assert result.failed_seeds() == []
    assert result.mean_d_pct() < 0


@pytest.mark.slow
def test_pendulum_halved_lr_narrows_uncorrected_spread():
    def mean_d2(lr):
        config = _pendulum(epochs=3, episodes_per_epoch=10)
        config.schedule.lr = lr
        result = run_bias_spread(config)
        assert result.failed_seeds() == []
        assert result.failed_fork_epochs() == 0
        values = [r.d2 for s in result.seeds for r in s.records]
        return sum(values) / len(values)

    assert mean_d2(1.5e-4) < mean_d2(3e-4)


@pytest.mark.slow
def test_pendulum_correction_holds_up_under_offpolicy_perturbation():
    config = _pendulum(epochs=30, episodes_per_epoch=10,
                       perturbation=PerturbationConfig(coordinate=0, threshold=0.5, weight=5.0))
    config.surrogate.alpha = 0.5
    experiment = run_offpolicy(config)
    assert not experiment.all_failed()
    test = seedwise_sign_test(experiment.final_returns("corrected"), experiment.final_returns("uncorrected"))
    assert test.n == 5
    assert test.wins > test.n / 2
