import math

import numpy as np
import pytest

from app.core.exceptions import BootstrapError, InvalidSize, PositivityViolation, StructureMissing
from app.snmm.bootstrap import (
    assign_hexagons,
    mbb_plan,
    moving_block_bootstrap,
    run_bootstrap,
    spatial_block_bootstrap,
    spatial_plan,
)
from app.snmm.estimands import EstimandSpec
from app.snmm.estimator import EstimationResult
from app.utils.seeding import rng_for


def test_mbb_plan_blocks_wrap_around():
    plan = mbb_plan(10, 4, replicates=5, seed=1)
    assert len(plan.blocks) == 10
    assert plan.blocks[8].tolist() == [8, 9, 0, 1]
    assert plan.draws_per_replicate == 3


def test_mbb_sample_is_sorted_and_truncated():
    plan = mbb_plan(10, 4, replicates=5, seed=1)
    idx = plan.sample(rng_for(1, 0, 0))
    assert idx.size == 10
    assert np.all(np.diff(idx) >= 0)
    assert idx.min() >= 0 and idx.max() < 10


def test_mbb_plan_rejects_bad_sizes():
    with pytest.raises(InvalidSize):
        mbb_plan(10, 0, replicates=5, seed=1)
    with pytest.raises(InvalidSize):
        mbb_plan(10, 11, replicates=5, seed=1)
    with pytest.raises(InvalidSize):
        mbb_plan(10, 2, replicates=1, seed=1)


def test_mbb_with_full_length_block_has_zero_variance(small_network_fit):
    n = small_network_fit.n_groups
    var = moving_block_bootstrap(small_network_fit, block_length=n, replicates=3, seed=5, threads=1)
    np.testing.assert_allclose(var.covariance, 0.0, atol=1e-20)
    np.testing.assert_allclose(var.replicates, np.tile(small_network_fit.psi_hat, (3, 1)), rtol=0, atol=1e-12)
    assert var.method == "mbb"
    assert var.tuning["block_length"] == n


def test_mbb_is_thread_count_invariant(small_network_fit):
    spec = EstimandSpec(kind="untreated_trajectory", k=2)
    serial = moving_block_bootstrap(small_network_fit, 5, replicates=6, seed=9, estimands=[spec], threads=1)
    pooled = moving_block_bootstrap(small_network_fit, 5, replicates=6, seed=9, estimands=[spec], threads=3)
    np.testing.assert_allclose(serial.replicates, pooled.replicates, rtol=0, atol=1e-12)
    np.testing.assert_allclose(serial.estimand_draws[spec.name], pooled.estimand_draws[spec.name], rtol=0, atol=1e-12)
    assert serial.estimand_draws[spec.name].shape == (6,)
    assert np.all(serial.standard_errors() > 0)


def test_mbb_percentile_intervals(small_network_fit):
    var = moving_block_bootstrap(small_network_fit, 5, replicates=8, seed=2, threads=1)
    ci = var.intervals(0.9)
    assert ci.shape == (13, 2)
    assert np.all(ci[:, 0] <= ci[:, 1])


def test_assign_hexagons_axial_coordinates():
    size = 10.0
    points = np.array(
        [
            [0.0, 0.0],
            [0.1 * size, 0.1 * size],
            [1.5 * size, math.sqrt(3) / 2 * size],
            [0.0, math.sqrt(3) * size],
        ]
    )
    cells, anchor = assign_hexagons(points, width=2 * size, anchor=(0.0, 0.0))
    assert anchor == (0.0, 0.0)
    assert cells.tolist() == [[0, 0], [0, 0], [1, 0], [0, 1]]


def test_assign_hexagons_anchor_defaults_to_bbox_corner():
    _, anchor = assign_hexagons(np.array([[5.0, 7.0], [9.0, 3.0]]), width=4.0)
    assert anchor == (5.0, 3.0)


def test_assign_hexagons_rejects_bad_width():
    with pytest.raises(ValueError):
        assign_hexagons(np.zeros((2, 2)), width=0.0)


def test_spatial_plan_blocks_partition_groups(small_network_fit):
    plan = spatial_plan(small_network_fit.mapped, hex_width_km=20.0, replicates=4, seed=1)
    flat = np.sort(np.concatenate(plan.blocks))
    np.testing.assert_array_equal(flat, np.arange(small_network_fit.n_groups))
    assert plan.meta["n_blocks"] > 1
    assert plan.meta["degenerate"] is False


def test_single_spatial_block_is_flagged(small_network_fit):
    var = spatial_block_bootstrap(small_network_fit, hex_width_km=1e6, replicates=2, seed=1, threads=1)
    assert var.tuning["degenerate"] is True
    assert var.tuning["n_blocks"] == 1
    assert var.tuning["hex_width_km"] == 1e6
    np.testing.assert_allclose(var.covariance, 0.0, atol=1e-20)


def test_spatial_bootstrap_needs_coordinates(cluster_fit):
    with pytest.raises(StructureMissing):
        spatial_block_bootstrap(cluster_fit, hex_width_km=10.0, replicates=2)


def test_failed_replicates_are_redrawn(small_network_fit, monkeypatch):
    original = EstimationResult.refit
    calls = []

    def flaky(self, mapped):
        calls.append(1)
        if len(calls) == 1:
            raise PositivityViolation("no zero-exposed group in this draw")
        return original(self, mapped)

    monkeypatch.setattr(EstimationResult, "refit", flaky)
    plan = mbb_plan(small_network_fit.n_groups, 10, replicates=2, seed=3)
    var = run_bootstrap(small_network_fit, plan, threads=1)
    assert var.tuning["retries"] == 1
    assert var.replicates.shape == (2, 13)


def test_bootstrap_gives_up_after_retries(small_network_fit, monkeypatch):
    def broken(self, mapped):
        raise PositivityViolation("always")

    monkeypatch.setattr(EstimationResult, "refit", broken)
    plan = mbb_plan(small_network_fit.n_groups, 10, replicates=2, seed=3)
    with pytest.raises(BootstrapError) as exc:
        run_bootstrap(small_network_fit, plan, threads=1, max_retries=2)
    assert exc.value.details["last_code"] == "positivity_violation"
