import os
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pgffc.checks import toy_arx_pair
from pgffc.ident import IdentConfig, identify_physical, identify_sweep
from pgffc.plant import DataGenSpec, PlantParams, discretize_controller, generate_training_data, realize
from pgffc.signals import NormSpec

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

SWEEP_WIDTHS = (2, 8, 32)


@pytest.fixture(scope="session")
def controller():
    return discretize_controller(100.0)


@pytest.fixture(scope="session")
def realization():
    return realize(PlantParams())


@pytest.fixture(scope="session")
def toy_pair():
    return toy_arx_pair()


@pytest.fixture(scope="session")
def benchmark_dataset(realization, controller):
    """Default training experiment: 15 reference copies, excitation, 1 um noise."""
    return generate_training_data(realization, controller, DataGenSpec())


@pytest.fixture(scope="session")
def linear_fit(benchmark_dataset, controller):
    return identify_physical(benchmark_dataset, controller, IdentConfig(), NormSpec())


@pytest.fixture(scope="session")
def timed_sweep(benchmark_dataset, controller, linear_fit):
    """Nested stage-2 fits for the widths 2, 8 and 32 keyed by width, and the wall time."""
    t0 = time.perf_counter()
    fits = identify_sweep(benchmark_dataset, controller, linear_fit.theta_phy_star, SWEEP_WIDTHS,
                          IdentConfig(), NormSpec())
    return dict(zip(SWEEP_WIDTHS, fits)), time.perf_counter() - t0


@pytest.fixture(scope="session")
def pgnn_sweep(timed_sweep):
    return timed_sweep[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE
