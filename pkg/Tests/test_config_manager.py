# ABOUTME: This file contains unit tests for the ConfigManager.
# ABOUTME: It covers per-environment defaults, strict loading, CLI overrides, validation and the config hash.
import json
import os

import pytest

from pg_bias_lab.config_manager import (ENV_ALIAS, ENV_CHAIN, ENV_PENDULUM, ConfigManager, ExperimentConfig,
                                        default_config)
from pg_bias_lab.estimator import REGULARIZER_REVERSE_KL, RETURN_SCALING_NONE, RETURN_SCALING_STANDARDIZE
from pg_bias_lab.exceptions import ConfigError
from pg_bias_lab.mdp import DISCOUNTED, UNDISCOUNTED
from pg_bias_lab.optim import ADAM
from pg_bias_lab.policy import MLP_GAUSSIAN, TABULAR_SOFTMAX, TIED_ALIAS
from pg_bias_lab.trainer import EXACT, FULL_BATCH, MINIBATCH


def test_pendulum_defaults():
    config = default_config()
    assert config.env == ENV_PENDULUM
    assert config.gamma == 0.99
    assert config.truncation == 200
    assert config.schedule.lr == 3e-4
    assert config.schedule.decay_factor == 0.8
    assert config.schedule.decay_every == 30
    assert config.training.mode == MINIBATCH
    assert config.training.lr_scale == 1000.0
    assert config.training.return_scaling == RETURN_SCALING_STANDARDIZE
    assert config.training.max_grad_norm == 10.0
    assert config.training_settings().max_grad_norm == 10.0
    assert config.surrogate.alpha == 0.3
    assert config.seeds == [0, 1, 2, 3, 4]
    assert config.policy_kind == MLP_GAUSSIAN


def test_tabular_defaults_are_valid():
    for env, kind in ((ENV_ALIAS, TIED_ALIAS), (ENV_CHAIN, TABULAR_SOFTMAX)):
        manager = ConfigManager(default_config(env))
        manager.validate()
        assert manager.config.policy_kind == kind
        assert manager.config.training.mode == FULL_BATCH
        assert manager.config.training.return_scaling == RETURN_SCALING_NONE
        assert manager.config.training.max_grad_norm is None
        assert manager.config.is_tabular


def test_unknown_environment_default():
    with pytest.raises(ConfigError):
        default_config("cartpole")


def test_save_and_load_round_trip(tmp_path):
    manager = ConfigManager(default_config(ENV_CHAIN))
    manager.config.surrogate.alpha = 0.1
    path = str(tmp_path / "config.json")
    manager.save(path)
    loaded = ConfigManager.load(path)
    assert loaded.to_dict() == manager.to_dict()
    assert loaded.config_hash() == manager.config_hash()


def test_load_reports_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        ConfigManager.load(str(tmp_path / "absent.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError):
        ConfigManager.load(str(bad))


def test_nested_sections_are_built():
    manager = ConfigManager.from_dict({"env": "alias", "policy_kind": "tied-alias", "training": {"mode": "exact"},
                                       "optimizer": {"algorithm": "adam", "adam_betas": [0.0, 0.99]}})
    assert manager.config.training.mode == EXACT
    assert manager.config.optimizer.algorithm == ADAM
    assert manager.config.optimizer.hyperparams()["adam_betas"] == (0.0, 0.99)


@pytest.mark.parametrize("data", [
    {"learning_rate": 0.1},
    {"schedule": {"lr": 0.1, "warmup": 5}},
    {"gamma": 1.0},
    {"epochs": 0},
    {"epochs": "10"},
    {"seeds": []},
    {"seeds": [1, 1]},
    {"env": "alias"},
    {"training": {"mode": "exact"}},
    {"training": {"return_scaling": "whiten"}},
    {"training": {"max_grad_norm": 0.0}},
    {"optimizer": {"algorithm": "lbfgs"}},
    {"surrogate": {"regularizer": "entropy"}},
    {"perturbation": {"weight": 0.5}},
    {"perturbation": {"state_indices": [0]}},
    {"schedule": "fast"},
])
def test_invalid_configurations_are_rejected(data):
    with pytest.raises(ConfigError):
        ConfigManager.from_dict(data)


def test_overrides_apply_and_validate():
    manager = ConfigManager()
    manager.apply_overrides(bias="on", optimizer="adam", regularizer="reverse-kl", beta=0.2, lr=1e-3, gamma=0.95,
                            seed=7, out="elsewhere", workers=3)
    config = manager.config
    assert config.surrogate.state_weighting == UNDISCOUNTED
    assert config.optimizer.algorithm == ADAM
    assert config.surrogate.regularizer == REGULARIZER_REVERSE_KL
    assert config.surrogate.beta == 0.2
    assert config.schedule.lr == 1e-3
    assert config.gamma == 0.95
    assert config.seeds == [7]
    assert config.output_dir == "elsewhere"
    assert config.workers == 3
    manager.apply_overrides(bias="off")
    assert manager.config.surrogate.state_weighting == DISCOUNTED


def test_environment_override_switches_defaults_but_keeps_seeds():
    manager = ConfigManager()
    manager.apply_overrides(seed=4)
    manager.apply_overrides(env=ENV_CHAIN)
    assert manager.config.env == ENV_CHAIN
    assert manager.config.policy_kind == TABULAR_SOFTMAX
    assert manager.config.seeds == [4]


def test_invalid_overrides_raise():
    with pytest.raises(ConfigError):
        ConfigManager().apply_overrides(bias="sometimes")
    with pytest.raises(ConfigError):
        ConfigManager().apply_overrides(gamma=1.5)


def test_hash_ignores_output_location_and_workers():
    manager = ConfigManager()
    digest = manager.config_hash()
    other = manager.copy()
    other.config.output_dir = "another/place"
    other.config.workers = 8
    assert other.config_hash() == digest
    other.config.gamma = 0.98
    assert other.config_hash() != digest
    assert manager.config.gamma == 0.99


def test_json_is_sorted_and_complete():
    data = json.loads(ConfigManager().to_json())
    assert set(data) == {f for f in ExperimentConfig.__dataclass_fields__}
    assert data["perturbation"] is None


def test_shipped_offpolicy_config_is_valid():
    path = os.path.join(os.path.dirname(__file__), "..", "configs", "pendulum_offpolicy.json")
    config = ConfigManager.load(path).config
    assert config.perturbation.weight == 5.0
    assert config.surrogate.alpha == 0.5
