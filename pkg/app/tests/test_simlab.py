"""Tests for the simulated designs and the Monte Carlo harness."""

import math

import numpy as np
import pytest

from app.core.exceptions import ConfigError, InvalidSize, MonteCarloError, PositivityViolation
from app.simlab import monte_carlo
from app.simlab.dgp import (
    APPLICATION_PSI,
    CLUSTER_PSI,
    ClusterDGPConfig,
    NetworkDGPConfig,
    application_estimands,
    cluster_psi_labels,
    estimand_truth,
    generate,
    naive_untreated_limit,
    network_model,
    network_table_estimands,
    synthetic_county_lattice,
)
from app.simlab.monte_carlo import naive_comparison, run_monte_carlo
from app.snmm.estimator import solve_psi
from app.snmm.inference import VarianceConfig

NETWORK_TRUTHS = [1.0, 1.3, 0.5, 0.9, 1.05, 0.4, 1.0, 0.9, 1.4, 1.2, 0.5, 0.45, 0.4]
DIRECT_ONLY_PSI = (1.0, 0.0, -0.1, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def test_network_table_truths():
    model = network_model()
    psi = NetworkDGPConfig().psi
    truths = [estimand_truth(model, psi, spec) for spec in network_table_estimands()]
    assert truths == pytest.approx(NETWORK_TRUTHS)


def test_network_table_labels():
    names = [spec.name for spec in network_table_estimands()]
    assert names[0] == "gamma_{0,1}(a_0=1,h_0=0)"
    assert names[-1] == "gamma_{1,2}(a_bar=(1,0),h_bar=(0,1))"
    assert len(set(names)) == 13


def test_cluster_labels():
    assert cluster_psi_labels()[0] == "psi^1_{0,1}"
    assert cluster_psi_labels()[-1] == "psi^3_{1,2}"


def test_network_exposure_marginals():
    mapped = generate(NetworkDGPConfig(n_units=20000, seed=3))
    a = mapped.panel.exposure
    # P(A_0 = 1) = 0.3 + 0.2 * E[U]
    assert a[:, 0].mean() == pytest.approx(0.4, abs=0.02)
    assert a[:, 1].mean() == pytest.approx(0.23, abs=0.02)
    assert not np.any((a[:, 0] == 1) & (a[:, 1] == 1))
    assert np.all(a[:, 2] == 0)
    # the two end units have a single neighbour
    assert mapped.h[0, 0, 0] == a[1, 0]


def test_generation_is_seeded():
    first = generate(NetworkDGPConfig(n_units=300, seed=8))
    again = generate(NetworkDGPConfig(n_units=300, seed=8))
    other = generate(NetworkDGPConfig(n_units=300, seed=9))
    np.testing.assert_array_equal(first.outcome, again.outcome)
    assert not np.array_equal(first.outcome, other.outcome)


def test_noise_conventions():
    assert NetworkDGPConfig().sd == pytest.approx(math.sqrt(0.1))
    assert NetworkDGPConfig(noise_convention="sd").sd == pytest.approx(0.1)
    assert ClusterDGPConfig(noise_sd=0.3).sd == 0.3


def test_outcome_noise_toggle():
    quiet = generate(NetworkDGPConfig(n_units=300, seed=8, outcome_noise=False))
    noisy = generate(NetworkDGPConfig(n_units=300, seed=8))
    np.testing.assert_array_equal(quiet.outcome[:, 0], noisy.outcome[:, 0])
    assert not np.array_equal(quiet.outcome[:, 1:], noisy.outcome[:, 1:])


def test_dgp_config_validation():
    with pytest.raises(ConfigError):
        NetworkDGPConfig(base_rate=0.9)
    with pytest.raises(ConfigError):
        NetworkDGPConfig(noise_convention="stdev")
    with pytest.raises(ConfigError):
        ClusterDGPConfig(psi=(1.0,))
    with pytest.raises(InvalidSize):
        NetworkDGPConfig(n_units=2)


def test_cluster_design_structure():
    mapped = generate(ClusterDGPConfig(n_clusters=50, seed=2))
    assert mapped.groups.shape == (50, 2)
    assert mapped.p == 2
    to_dict = ClusterDGPConfig(n_clusters=50).to_dict()
    assert to_dict["name"] == "cluster_pairs"
    assert to_dict["resolved_noise_sd"] == pytest.approx(math.sqrt(0.1))


def test_county_lattice_spillover_crosses_state_borders():
    lattice = synthetic_county_lattice(n_side=10, state_side=5, seed=1)
    graph = lattice.mapped.panel.graph
    state = lattice.state_of
    assert graph.n_edges > 0
    for i, nbrs in enumerate(graph.adjacency):
        for j in nbrs:
            assert state[i] != state[j]
    assert lattice.mapped.panel.coordinates.shape == (100, 2)


def test_county_lattice_recovers_psi_without_noise():
    lattice = synthetic_county_lattice(n_side=20, noise_sd=0.0, seed=4)
    result = solve_psi(lattice.mapped, lattice.model)
    np.testing.assert_allclose(result.psi_hat, APPLICATION_PSI, atol=1e-6)


def test_county_lattice_size_checked():
    with pytest.raises(InvalidSize):
        synthetic_county_lattice(n_side=7)


def test_application_estimands():
    specs = application_estimands()
    assert len(specs) == 6
    assert {s.m for s in specs} == {0}


def test_monte_carlo_exact_cluster_design():
    dgp = ClusterDGPConfig(n_clusters=400, seed=5, noise_sd=0.0)
    report = run_monte_carlo(dgp, replicates=3, threads=1)
    assert report.dgp == "cluster_pairs"
    assert report.replicates == 3
    assert report.failures == 0
    assert [row.truth for row in report.rows] == list(CLUSTER_PSI)
    for row in report.rows:
        assert row.bias == pytest.approx(0.0, abs=1e-6)
        assert row.replicates == 3


def test_monte_carlo_is_reproducible_across_threads():
    dgp = ClusterDGPConfig(n_clusters=300, seed=6)
    serial = run_monte_carlo(dgp, replicates=3, threads=1)
    pooled = run_monte_carlo(dgp, replicates=3, threads=3)
    assert serial.to_frame().equals(pooled.to_frame())
    assert serial.to_dict()["config"]["variance"]["method"] == "sandwich"


def test_monte_carlo_network_with_bootstrap():
    dgp = NetworkDGPConfig(n_units=300, seed=7)
    variance = VarianceConfig(method="mbb", block_length=5, replicates=3)
    report = run_monte_carlo(dgp, variance=variance, replicates=2, threads=1)
    assert len(report.rows) == 13
    frame = report.to_frame()
    assert list(frame.columns) == ["estimand", "truth", "mean", "sd", "mean_se", "coverage", "replicates"]
    assert frame.truth.tolist() == pytest.approx(NETWORK_TRUTHS)


def test_monte_carlo_needs_two_replicates():
    with pytest.raises(InvalidSize):
        run_monte_carlo(ClusterDGPConfig(n_clusters=50), replicates=1)


def test_monte_carlo_failure_rate(monkeypatch):
    def failing(*args, **kwargs):
        raise PositivityViolation("no zero-exposed group")

    monkeypatch.setattr(monte_carlo, "solve_psi", failing)
    with pytest.raises(MonteCarloError) as exc:
        run_monte_carlo(ClusterDGPConfig(n_clusters=50), replicates=2, threads=1)
    assert exc.value.details["codes"] == {"positivity_violation": 2}


def test_naive_comparison_rows():
    dgp = NetworkDGPConfig(n_units=400, seed=10)
    report = naive_comparison(dgp, replicates=2, variance=VarianceConfig(method="sandwich"), threads=1)
    labels = [row.estimand for row in report.rows]
    assert labels == ["E[Y_2(0)]", "E[Y_2(0)] (no interference)"]
    assert all(row.truth == 0.5 for row in report.rows)


def test_naive_comparison_network_only():
    with pytest.raises(ConfigError):
        naive_comparison(ClusterDGPConfig(n_clusters=50), replicates=2)


def test_naive_untreated_limit():
    assert naive_untreated_limit(NetworkDGPConfig()) == pytest.approx(0.9504, abs=5e-4)
    assert naive_untreated_limit(NetworkDGPConfig(psi=DIRECT_ONLY_PSI)) == pytest.approx(0.5)


def test_naive_fit_converges_to_its_limit():
    dgp = NetworkDGPConfig(n_units=2000, seed=31)
    report = naive_comparison(dgp, replicates=10, variance=VarianceConfig(method="sandwich"), threads=1)
    naive = report.row("E[Y_2(0)] (no interference)")
    aware = report.row("E[Y_2(0)]")
    assert report.config["naive_limit"] == pytest.approx(naive_untreated_limit(dgp))
    assert naive.mean == pytest.approx(report.config["naive_limit"], abs=0.03)
    assert naive.coverage == 0.0
    assert aware.mean == pytest.approx(0.5, abs=0.05)


def test_naive_fit_is_unbiased_without_spillover():
    dgp = NetworkDGPConfig(n_units=2000, seed=32, psi=DIRECT_ONLY_PSI)
    report = naive_comparison(dgp, replicates=5, variance=VarianceConfig(method="sandwich"), threads=1)
    for row in report.rows:
        assert row.mean == pytest.approx(0.5, abs=0.05)


def _within_tolerance(row, floor=0.0):
    return abs(row.bias) <= max(floor, 3 * row.mcse)


@pytest.mark.slow
def test_network_design_table():
    variance = VarianceConfig(method="mbb", block_length=5, replicates=200)
    report = run_monte_carlo(NetworkDGPConfig(n_units=2000, seed=22), variance=variance, replicates=200)
    assert [row.truth for row in report.rows] == pytest.approx(NETWORK_TRUTHS)
    for row in report.rows:
        assert _within_tolerance(row, floor=0.02), row
        assert 0.89 <= row.coverage <= 0.99, row


@pytest.mark.slow
def test_cluster_design_table():
    report = run_monte_carlo(ClusterDGPConfig(n_clusters=2000, seed=21), replicates=200)
    for row in report.rows:
        assert _within_tolerance(row), row
        assert row.mean_se == pytest.approx(row.sd, rel=0.25), row
        assert 0.91 <= row.coverage <= 0.98, row


@pytest.mark.slow
def test_naive_fit_negative_control():
    dgp = NetworkDGPConfig(n_units=2000, seed=23)
    variance = VarianceConfig(method="mbb", block_length=5, replicates=200)
    report = naive_comparison(dgp, replicates=200, variance=variance)
    naive = report.row("E[Y_2(0)] (no interference)")
    aware = report.row("E[Y_2(0)]")
    assert abs(naive.mean - naive_untreated_limit(dgp)) <= max(0.02, 3 * naive.mcse)
    assert naive.coverage <= 0.02
    assert _within_tolerance(aware, floor=0.02)
    assert aware.coverage >= 0.89
