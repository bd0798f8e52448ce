import numpy as np
import pytest

from app.core.exceptions import DimensionMismatch, LeakageError, SpecParseError, ZeroConstraintViolation
from app.simlab.dgp import CLUSTER_PSI, NETWORK_PSI
from app.snmm.blip import (
    BUILTIN_MODELS,
    blip_down,
    blip_features,
    blip_value,
    builtin_model,
    check_model,
    cluster_blip_values,
    feature_tensor,
    format_blip_spec,
    parse_blip_spec,
    unit_features,
)
from app.snmm.exposure_map import MappingSpec, apply_mapping


def test_parse_network_model_labels():
    model = builtin_model("network_saturated")
    assert model.n_params == 13
    assert model.labels[0] == "psi1"
    assert model.labels[-1] == "psi13"
    assert model.uses_spillover
    assert not model.member_scoped


@pytest.mark.parametrize("name", sorted(BUILTIN_MODELS))
def test_format_parse_is_stable(name):
    model = builtin_model(name)
    assert parse_blip_spec(format_blip_spec(model)) == model


def test_implicit_block_applies_everywhere():
    model = parse_blip_spec("psi: a[m]\n")
    assert len(model.blocks) == 1
    assert model.blocks[0].matches(1, 2, None)


def test_separators_and_comments():
    text = "[m=0]  # first period\npsi1: a[m]; psi2: h[m][0]\n\n[m=1,k=2]\npsi3: a[m]*h[m-1][0]\n"
    model = parse_blip_spec(text)
    assert model.labels == ("psi1", "psi2", "psi3")
    assert [b.m for b in model.blocks] == [0, 1]


def test_zero_constraint_violation():
    with pytest.raises(ZeroConstraintViolation) as exc:
        parse_blip_spec("[m=1,k=2]\nbad: h[m-1][0]\n")
    assert exc.value.details["label"] == "bad"


def test_extra_terms_need_not_vanish():
    model = parse_blip_spec("x1: h[m-1][0]\n", require_zero=False)
    assert model.labels == ("x1",)


def test_future_reference_is_leakage():
    with pytest.raises(LeakageError):
        parse_blip_spec("psi: a[m+1]\n")


def test_absolute_time_after_block_is_leakage():
    with pytest.raises(LeakageError):
        parse_blip_spec("[m=0]\npsi: a[m]*a[1]\n")


def test_syntax_error_reports_position():
    with pytest.raises(SpecParseError) as exc:
        parse_blip_spec("psi1 a[m]\n")
    assert exc.value.details["line"] == 1


def test_conflicting_scopes():
    with pytest.raises(SpecParseError):
        parse_blip_spec("[all,m=0]\npsi: a[m]\n")


def test_network_blip_values():
    model = builtin_model("network_saturated")
    psi = np.array(NETWORK_PSI)
    assert blip_value(model, psi, 0, 1, [(1, 0)]) == pytest.approx(1.0)
    assert blip_value(model, psi, 0, 1, [(1, 1)]) == pytest.approx(1.3)
    assert blip_value(model, psi, 0, 1, [(0, 1)]) == pytest.approx(0.5)
    assert blip_value(model, psi, 0, 2, [(1, 1)]) == pytest.approx(1.05)
    assert blip_value(model, psi, 1, 2, [(0, 1), (1, 1)]) == pytest.approx(1.2)
    assert blip_value(model, psi, 1, 2, [(1, 0), (0, 1)]) == pytest.approx(0.4)


def test_blip_vanishes_at_zero_exposure():
    model = builtin_model("network_saturated")
    psi = np.array(NETWORK_PSI)
    assert blip_value(model, psi, 0, 2, [(0, 0)]) == 0.0
    assert blip_value(model, psi, 1, 2, [(1, 1), (0, 0)]) == 0.0


def test_features_need_k_after_m():
    with pytest.raises(IndexError):
        blip_features(builtin_model("network_saturated"), 1, 1, [(0, 0), (0, 0)])


def test_history_length_checked():
    with pytest.raises(DimensionMismatch):
        blip_features(builtin_model("network_saturated"), 1, 2, [(0, 0)])


def test_times_before_zero_evaluate_to_zero():
    model = parse_blip_spec("psi: a[m]*h[m-1][0]\n")
    assert blip_value(model, np.array([2.0]), 0, 1, [(1, 1)]) == 0.0
    assert blip_value(model, np.array([2.0]), 1, 2, [(0, 1), (1, 0)]) == 2.0


def test_lagsum_and_timegap_atoms():
    model = parse_blip_spec("psi1: a[m]*lagsum_a\npsi2: a[m]*timegap\n")
    feats = blip_features(model, 2, 5, [(1, 0), (1, 0), (1, 0)])
    assert feats.tolist() == [2.0, 2.0]


def test_cluster_member_scoped_blips():
    model = builtin_model("cluster_symmetric")
    psi = np.array(CLUSTER_PSI)
    # member 0 treated at m=0, member 1 not
    members = [([(1, (1, 0))], None), ([(0, (1, 0))], None)]
    values = cluster_blip_values(model, psi, 0, 1, members)
    assert values.tolist() == pytest.approx([1.0, 0.5])


def test_cluster_interaction_term_counts_both_periods():
    model = builtin_model("cluster_symmetric")
    # member 0 treated at m=1, member 1 treated at m=0
    feats = blip_features(model, 1, 2, [(0, (0, 1)), (1, (1, 0))], j=0)
    index = model.labels.index("psi12_3")
    assert feats[index] == 1.0


def test_check_model_dimension(line_panel):
    mapped = apply_mapping(line_panel, MappingSpec(kind="neighbor_max"))
    with pytest.raises(DimensionMismatch):
        check_model(parse_blip_spec("psi: a[m]*h[m][1]\n"), mapped)
    with pytest.raises(DimensionMismatch):
        check_model(builtin_model("cluster_symmetric"), mapped)


def test_unknown_builtin_model():
    with pytest.raises(KeyError):
        builtin_model("nope")


def test_blip_down_identities(exact_network):
    model = builtin_model("network_saturated")
    H = blip_down(model, np.zeros(model.n_params), exact_network).H
    Y = exact_network.outcome
    for k in range(3):
        for m in range(k + 1):
            np.testing.assert_array_equal(H[:, m, k], Y[:, k])

    H = blip_down(model, np.array(NETWORK_PSI), exact_network).H
    for k in range(3):
        np.testing.assert_array_equal(H[:, k, k], Y[:, k])
    # fully blipped-down outcomes are the untreated outcomes; noise-free Y(0) is constant in time
    np.testing.assert_allclose(H[:, 0, 2], H[:, 0, 0], atol=1e-12)


def test_blip_down_checks_psi_length(exact_network):
    with pytest.raises(DimensionMismatch):
        blip_down(builtin_model("network_saturated"), np.zeros(3), exact_network)


def test_unit_features_shape(exact_network):
    feats = unit_features(builtin_model("network_saturated"), exact_network, 0, 2)
    assert feats.shape == (exact_network.n_units, 13)
    # m=1 terms are scoped to [m=1,k=2]
    assert np.all(feats[:, 6:] == 0)


def test_feature_tensor_groups_members(exact_clusters):
    model = builtin_model("cluster_symmetric")
    tensor = feature_tensor(model, exact_clusters, 0, 1)
    assert tensor.shape == (exact_clusters.n_groups, 2, model.n_params)
    flat = unit_features(model, exact_clusters, 0, 1)
    np.testing.assert_array_equal(tensor[:, 1], flat[exact_clusters.groups[:, 1]])
