import copy

import numpy as np
import pytest

from hardynash.scenario import load_bundled, scenario_from_config

BASE = {
    "name": "small",
    "seed": 7,
    "grid": {"mode": "radial3d", "cells": 24, "extent": 2.0},
    "regions": {
        "case": "shared",
        "O": [1.2, 1.6],
        "O1": [1.0, 1.2],
        "O2": [1.6, 1.8],
        "O1d": [1.3, 1.7],
        "O2d": [1.3, 1.7],
    },
    "model": {"mu": 0.2, "T_seconds": 0.5, "steps": 16, "theta": 0.5, "alpha": [1000.0, 1000.0]},
    "data": {
        "y0": "mode(1)",
        "y1d": "ybar + 0.2*exp(-(r - 1.45)**2/0.02)",
        "y2d": "ybar + 0.2*exp(-(r - 1.45)**2/0.02)",
    },
    "leader": {"eps": [1e-1, 1e-2, 1e-3], "penalty": "exact"},
}


def small_config(**sections):
    """Copy of the small radial config with selected sections updated."""
    cfg = copy.deepcopy(BASE)
    for key, val in sections.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    return cfg


def small_scenario(**sections):
    return scenario_from_config(small_config(**sections))


@pytest.fixture(scope="session")
def shared():
    return load_bundled("linear_shared")


@pytest.fixture(scope="session")
def distinct():
    return load_bundled("linear_distinct")


@pytest.fixture(scope="session")
def tensor():
    return load_bundled("tensor_heat")


@pytest.fixture(scope="session")
def semi():
    return load_bundled("semilinear_tanh")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
