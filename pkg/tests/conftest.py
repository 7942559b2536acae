"""Shared pipelines for the test suite.

Lattices, schedules and Ulam densities dominate the run time, so each
configuration is built once per session and reused through ``Experiment``.
"""

import warnings

import numpy as np
import pytest

from afnlab.cli import Experiment, load_config

ACCEPTANCE_LINES = {}


def record(number: int, ok: bool, detail: str) -> None:
    """Store the pass/fail line for acceptance criterion ``number``."""
    ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


FINITE_CAPS = {"alpha": 0.5, "b": 0.5}
INFINITE_CAPS = {"alpha": 1.5, "b": 0.5, "depth_n": 180000, "depth_k": 8, "phi_cap": 180000,
                 "grid_cells": 512, "n_max": 10000, "tau_cap": 10000}


def make_experiment(overrides):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return Experiment(load_config(None, overrides))


@pytest.fixture(scope="session")
def finite():
    """alpha = 0.5, b = 0.5 with the default caps (1024-cell base grid)."""
    return make_experiment(FINITE_CAPS)


@pytest.fixture(scope="session")
def infinite():
    """alpha = 1.5, b = 0.5; the schedule leaves under 1e-3 of Y uncovered."""
    return make_experiment(INFINITE_CAPS)


@pytest.fixture(scope="session")
def small_infinite():
    """alpha = 1.5 with a short lattice, for cheap structural tests."""
    return make_experiment({"alpha": 1.5, "b": 0.5, "depth_n": 3000, "depth_k": 6, "phi_cap": 3000,
                            "grid_cells": 128, "tau_cap": 3000, "max_uncovered": 1e-1})


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
