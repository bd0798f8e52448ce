import numpy as np
import pytest

from app.core.exceptions import ConfigError
from app.snmm.estimands import EstimandSpec
from app.snmm.inference import VarianceConfig, compute_variance, infer
from app.snmm.variance import sandwich_cluster


@pytest.mark.parametrize(
    "kwargs",
    [
        {"method": "delta"},
        {"kernel": "epanechnikov"},
        {"method": "mbb"},
        {"method": "spatial"},
        {"method": "mbb", "block_length": 5, "replicates": 1},
    ],
)
def test_variance_config_validation(kwargs):
    with pytest.raises(ConfigError):
        VarianceConfig(**kwargs)


def test_with_seed_keeps_other_fields():
    config = VarianceConfig(method="mbb", block_length=4, replicates=9)
    reseeded = config.with_seed(42)
    assert reseeded.seed == 42
    assert reseeded.block_length == 4
    assert reseeded.is_bootstrap
    assert not VarianceConfig().is_bootstrap


def test_dispatch(small_network_fit):
    sandwich = compute_variance(small_network_fit, VarianceConfig())
    np.testing.assert_allclose(sandwich.covariance, sandwich_cluster(small_network_fit).covariance)
    assert compute_variance(small_network_fit, VarianceConfig(method="hac")).method == "hac"
    mbb = compute_variance(small_network_fit, VarianceConfig(method="mbb", block_length=5, replicates=3), threads=1)
    assert mbb.replicates.shape == (3, 13)
    spatial = VarianceConfig(method="spatial", hex_width_km=1e6, replicates=2)
    assert compute_variance(small_network_fit, spatial, threads=1).method == "spatial"
    assert compute_variance(small_network_fit, VarianceConfig(method="none")) is None


def test_infer_rows(small_network_fit):
    specs = [EstimandSpec(kind="untreated_trajectory", k=k) for k in range(3)]
    variance, rows = infer(small_network_fit, VarianceConfig(method="hac", kernel="parzen"), specs)
    assert variance.method == "hac"
    assert [r.name for r in rows] == ["E[Y_0(0)]", "E[Y_1(0)]", "E[Y_2(0)]"]
    assert all(r.ci_low <= r.estimate <= r.ci_high for r in rows)
