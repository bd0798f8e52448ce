import numpy as np
import pytest

from app.core.types import PanelDataset
from app.panel.graphs import line_graph
from app.simlab.dgp import ClusterDGPConfig, NetworkDGPConfig, cluster_model, generate, network_model
from app.snmm.estimator import solve_psi


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow Monte Carlo tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte Carlo checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def exact_network():
    """Line network with noise-free outcomes: psi-hat equals the true psi."""
    return generate(NetworkDGPConfig(n_units=2000, seed=11, noise_sd=0.0))


@pytest.fixture
def noisy_network():
    return generate(NetworkDGPConfig(n_units=1500, seed=12))


@pytest.fixture
def exact_clusters():
    return generate(ClusterDGPConfig(n_clusters=1500, seed=13, noise_sd=0.0))


@pytest.fixture
def network_fit(noisy_network):
    return solve_psi(noisy_network, network_model())


@pytest.fixture
def small_network_fit():
    mapped = generate(NetworkDGPConfig(n_units=400, seed=14))
    return solve_psi(mapped, network_model())


@pytest.fixture
def cluster_fit():
    mapped = generate(ClusterDGPConfig(n_clusters=1000, seed=15))
    return solve_psi(mapped, cluster_model())


def _panel(exposure, outcome=None, structure=None, coordinates=None):
    exposure = np.asarray(exposure, dtype=float)
    n, t = exposure.shape
    return PanelDataset(
        unit_ids=tuple(f"u{i}" for i in range(n)),
        exposure=exposure,
        covariates=np.zeros((n, t, 0)),
        outcome=np.zeros((n, t)) if outcome is None else np.asarray(outcome, dtype=float),
        structure=structure,
        coordinates=coordinates,
    )


@pytest.fixture
def make_panel():
    return _panel


@pytest.fixture
def line_panel():
    # unit 0 exposed at t=0, unit 3 at t=1
    exposure = [[1, 0, 0], [0, 0, 0], [0, 0, 0], [0, 1, 0]]
    return _panel(exposure, structure=line_graph(4))
