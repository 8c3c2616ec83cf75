# ABOUTME: This file provides shared pytest fixtures for the pg_bias_lab tests.
# ABOUTME: It supplies seeded generators, ready-made MDPs and one offscreen Qt application for the plotting tests.

import os
import sys

import numpy as np
import pytest

from pg_bias_lab.mdp import AliasMdp, make_chain_mdp, random_episodic_mdp

# Global reference to the Qt application instance
_app = None


@pytest.fixture(scope='session')
def qapp():
    """Provides a QGuiApplication on the offscreen platform for the entire test session."""
    global _app
    os.environ.setdefault("QT_QPA_PLATFORM", "offscreen")
    from PyQt5.QtGui import QGuiApplication
    if _app is None:
        _app = QGuiApplication.instance()
        if _app is None:
            _app = QGuiApplication(sys.argv[:1])
    return _app


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def alias():
    return AliasMdp(gamma=0.9)


@pytest.fixture
def chain():
    return make_chain_mdp(n_states=4, gamma=0.9)


@pytest.fixture
def random_mdp():
    return random_episodic_mdp(np.random.default_rng(7), n_states=4, n_actions=3, gamma=0.9)
