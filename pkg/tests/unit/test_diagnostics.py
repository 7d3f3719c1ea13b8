import numpy as np
import pytest

from models.editing.editor import EditOutcome
from models.editing.keyspace import KeyBundle, SecondMoment
from models.errors import DimensionMismatch, EmptyInput, SequenceTooShort
from models.transformer.tiny_lm import forward
from src.editlab.core.diagnostics import (
    baseline_denominator,
    cluster_distance,
    collapse_risk,
    denominator_stats,
    key_divergence,
    layer_profile,
)


def bundle(k_bar, k_u):
    k_bar, k_u = np.asarray(k_bar, dtype=float), np.asarray(k_u, dtype=float)
    return KeyBundle(k_bar=k_bar, k_u=k_u, per_prefix_keys=k_bar[None, :], subject_tokens=(65,), subject_last_index=0)


def outcome(denominator, mode="c_rome", numerator=None):
    numerator = np.array([[3.0, 0.0], [0.0, 4.0]]) if numerator is None else numerator
    k = np.ones(numerator.shape[1])
    return EditOutcome(
        w_hat=numerator / denominator,
        delta=numerator / denominator,
        numerator=numerator,
        denominator=denominator,
        v_star=np.zeros(2),
        v_zero=np.zeros(2),
        key_bundle=bundle(k, k),
        mode=mode,
        q=k,
        k_right=k,
    )


def test_cluster_distance_hand_example():
    assert cluster_distance([np.array([0.0, 0.0]), np.array([2.0, 0.0])]) == pytest.approx(1.0)
    assert cluster_distance([np.array([1.0, 2.0])]) == 0.0


def test_cluster_distance_translation_and_scale(rng):
    X = list(rng.normal(size=(6, 4)))
    base = cluster_distance(X)
    shift = rng.normal(size=4)
    assert cluster_distance([x + shift for x in X]) == pytest.approx(base, rel=1e-12)
    assert cluster_distance([-3.0 * x for x in X]) == pytest.approx(3.0 * base, rel=1e-12)


def test_cluster_distance_errors():
    with pytest.raises(EmptyInput):
        cluster_distance([])
    with pytest.raises(DimensionMismatch):
        cluster_distance([np.zeros(2), np.zeros(3)])


def test_first_position_keys_coincide_for_a_shared_first_byte(tiny_model):
    profile = layer_profile(tiny_model, [tuple(b"abc"), tuple(b"axyz"), tuple(b"a q")], all_layers=True)
    assert [layer.layer for layer in profile.layers] == [0, 1]
    for layer in profile.layers:
        assert layer.d_first == pytest.approx(0.0, abs=1e-9)
        assert layer.d_subsequent > 0
        assert layer.n_first == 3
        assert layer.n_subsequent == 2 + 3 + 2


def test_single_prompt_has_zero_first_spread(tiny_model):
    profile = layer_profile(tiny_model, [tuple(b"hello")])
    assert len(profile.layers) == 1
    assert profile.layers[0].d_first == 0.0


def test_profile_matches_recomputed_keys(tiny_model):
    prompts = [tuple(b"the cat"), tuple(b"a dog ran"), tuple(b"birds")]
    profile = layer_profile(tiny_model, prompts, through_layer=1)
    keys = [forward(tiny_model, p).layer_keys[1] for p in prompts]
    first = [k[0] for k in keys]
    rest = [row for k in keys for row in k[1:]]
    assert profile.layers[1].d_first == pytest.approx(cluster_distance(first), rel=1e-12)
    assert profile.layers[1].d_subsequent == pytest.approx(cluster_distance(rest), rel=1e-12)


def test_profile_errors(tiny_model):
    with pytest.raises(SequenceTooShort):
        layer_profile(tiny_model, [tuple(b"a")])
    with pytest.raises(EmptyInput):
        layer_profile(tiny_model, [])
    with pytest.raises(ValueError):
        layer_profile(tiny_model, [tuple(b"ab")], through_layer=5)


def test_identical_keys_do_not_diverge(rng):
    keys = rng.normal(size=(4, 5))
    C = SecondMoment(C=np.eye(5), sample_count=1, ridge=1.0, layer=0)
    record = key_divergence([bundle(k, k) for k in keys], C, group="normal")
    for comparison in (record.prefixed_vs_unprefixed, record.whitened_vs_unprefixed):
        assert comparison.centroid_distance == pytest.approx(0.0, abs=1e-12)
        assert comparison.mean_cosine == pytest.approx(1.0)
    assert record.n_cases == 4
    assert set(record.projection) == {"k_bar", "k_u", "whitened_k_bar", "k_u_whitened_frame"}
    assert len(record.projection["k_bar"]) == 4


def test_divergence_measures_a_common_shift(rng):
    k_u = rng.normal(size=(3, 4))
    shift = np.array([1.0, 2.0, 2.0, 0.0])
    C = SecondMoment(C=2.0 * np.eye(4), sample_count=1, ridge=1.0, layer=0)
    record = key_divergence([bundle(u + shift, u) for u in k_u], C)
    assert record.prefixed_vs_unprefixed.centroid_distance == pytest.approx(3.0)
    whitened = (k_u + shift) / 2.0
    expected = np.linalg.norm(whitened.mean(axis=0) - k_u.mean(axis=0))
    assert record.whitened_vs_unprefixed.centroid_distance == pytest.approx(expected)


def test_divergence_needs_two_cases():
    C = SecondMoment(C=np.eye(2), sample_count=1, ridge=1.0, layer=0)
    with pytest.raises(EmptyInput):
        key_divergence([bundle([1.0, 0.0], [1.0, 0.0])], C)


def test_denominator_stats_group_means():
    report = denominator_stats(
        [(outcome(1.0), "normal"), (outcome(-3.0), "normal"), (outcome(0.01), "collapse_pattern")],
        case_ids=["a", "b", "c"],
    )
    assert [r.case_id for r in report.rows] == ["a", "b", "c"]
    assert report.rows[1].abs_denominator == 3.0
    assert report.rows[0].numerator_norm == pytest.approx(5.0)
    groups = {g.group: g for g in report.groups}
    assert [g.group for g in report.groups] == ["collapse_pattern", "normal"]
    assert groups["normal"].n_cases == 2
    assert groups["normal"].mean_abs_denominator == pytest.approx(2.0)
    assert groups["normal"].mean_delta_norm == pytest.approx((5.0 + 5.0 / 3.0) / 2)
    assert groups["collapse_pattern"].mean_delta_norm == pytest.approx(500.0)


def test_denominator_stats_edge_cases():
    empty = denominator_stats([])
    assert empty.rows == [] and empty.groups == []
    with pytest.raises(ValueError):
        denominator_stats([(outcome(1.0), "normal")], case_ids=["a", "b"])


def test_baseline_prefers_the_normal_median():
    report = denominator_stats([(outcome(d), "normal") for d in (1.0, 2.0, 9.0)])
    assert baseline_denominator(report, configured=5.0) == 2.0
    only_collapse = denominator_stats([(outcome(0.1), "collapse_pattern")])
    assert baseline_denominator(only_collapse, configured=5.0) == 5.0
    assert baseline_denominator(only_collapse) is None


def test_collapse_risk_threshold_is_strict():
    assert collapse_risk(0.01, baseline=1.0).level == "high"
    assert collapse_risk(0.02, baseline=1.0).level == "low"
    assert collapse_risk(outcome(-0.5), baseline=1.0, threshold=0.6).level == "high"
    risk = collapse_risk(outcome(2.0), baseline=4.0)
    assert risk.ratio == 0.5 and risk.level == "low"
    with pytest.raises(ValueError):
        collapse_risk(1.0, baseline=0.0)


def test_cluster_distance_against_a_two_pass_loop(rng):
    X = rng.normal(size=(50, 16))
    centroid = [0.0] * 16
    for x in X:
        for j in range(16):
            centroid[j] += x[j] / 50
    expected = 0.0
    for x in X:
        expected += sum((x[j] - centroid[j]) ** 2 for j in range(16)) ** 0.5 / 50
    assert cluster_distance(list(X)) == pytest.approx(expected, abs=1e-10)


def test_denominator_stats_against_direct_group_means(rng):
    labels = ["normal", "collapse_pattern", "initial"]
    pairs = []
    for i in range(30):
        denominator = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.05, 3.0))
        pairs.append((outcome(denominator, numerator=rng.normal(size=(3, 5))), labels[i % 3]))
    report = denominator_stats(pairs)
    assert [r.case_id for r in report.rows] == [str(i) for i in range(30)]
    assert [g.group for g in report.groups] == sorted(labels)
    for group in report.groups:
        members = [o for o, label in pairs if label == group.group]
        assert group.n_cases == len(members)
        assert group.mean_abs_denominator == pytest.approx(
            np.mean([abs(o.denominator) for o in members]), abs=1e-10
        )
        assert group.mean_numerator_norm == pytest.approx(
            np.mean([np.sqrt(np.sum(o.numerator ** 2)) for o in members]), abs=1e-10
        )
        assert group.mean_delta_norm == pytest.approx(
            np.mean([np.sqrt(np.sum((o.numerator / o.denominator) ** 2)) for o in members]), abs=1e-10
        )


def test_key_divergence_against_direct_recomputation(rng, make_spd):
    k_bar, k_u = rng.normal(size=(12, 6)), rng.normal(size=(12, 6))
    C = SecondMoment(C=make_spd(6), sample_count=100, ridge=1.0, layer=0)
    record = key_divergence([bundle(a, b) for a, b in zip(k_bar, k_u)], C, group="normal")
    whitened = np.array([np.linalg.solve(C.C, a) for a in k_bar])
    for comparison, left in ((record.prefixed_vs_unprefixed, k_bar), (record.whitened_vs_unprefixed, whitened)):
        assert comparison.centroid_distance == pytest.approx(
            np.linalg.norm(left.mean(axis=0) - k_u.mean(axis=0)), abs=1e-10
        )
        cosines = [a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) for a, b in zip(left, k_u)]
        np.testing.assert_allclose(comparison.cosines, cosines, rtol=0, atol=1e-10)
        assert comparison.mean_cosine == pytest.approx(np.mean(cosines), abs=1e-10)
    assert record.n_cases == 12
    assert len(record.projection["k_bar"]) == 12
