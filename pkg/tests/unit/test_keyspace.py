import numpy as np
import pytest

from models.editing.keyspace import (
    PrefixSet,
    SecondMoment,
    SecondMomentAccumulator,
    estimate_second_moment,
    load_second_moment,
    prefixed_key,
    sample_prefixes,
    save_second_moment,
    second_moment_from_accumulator,
    unprefixed_key,
)
from models.errors import CorpusTooSmall, EmptyInput, NotSymmetric
from models.transformer.tiny_lm import _forward, encode_input, forward


def test_empty_prefix_gives_the_unprefixed_key(tiny_model):
    bundle = prefixed_key(tiny_model, [80], PrefixSet.empty())
    np.testing.assert_array_equal(bundle.k_bar, bundle.k_u)
    assert bundle.n_prefixes == 1


def test_prefixed_key_averages_keys_at_the_subject_end(tiny_model):
    subject = (80, 97)
    prefixes = PrefixSet.from_texts(["Hi. ", "Once ", "x"])
    bundle = prefixed_key(tiny_model, subject, prefixes)
    expected = []
    for p in prefixes:
        trace = forward(tiny_model, p + subject)
        expected.append(trace.tapped_keys[len(p) + 1])
    np.testing.assert_allclose(bundle.per_prefix_keys, expected, atol=0)
    np.testing.assert_allclose(bundle.k_bar, np.mean(expected, axis=0), atol=1e-15)
    np.testing.assert_array_equal(bundle.k_u, forward(tiny_model, subject).tapped_keys[1])
    assert bundle.subject_last_index == 1


def test_unprefixed_key_of_an_initial_subject_sits_after_bos(bos_model):
    key = unprefixed_key(bos_model, [80])
    _, keys, _, _ = _forward(bos_model, encode_input(bos_model, [80]))
    np.testing.assert_array_equal(key, keys[bos_model.config.edited_layer][0, 1])


def test_random_byte_prefixes_follow_the_seed(tiny_model):
    prefixes = sample_prefixes(tiny_model, n=4, length=5, seed=11, source="random_bytes")
    oracle = np.random.default_rng(11).integers(0, 256, size=(4, 5))
    assert [list(p) for p in prefixes] == oracle.tolist()
    assert prefixes.source == "random_bytes" and prefixes.seed == 11


def test_model_generated_prefixes_are_reproducible(tiny_model):
    a = sample_prefixes(tiny_model, n=3, length=2, seed=5, max_length=6)
    b = sample_prefixes(tiny_model, n=3, length=2, seed=5, max_length=6)
    assert a == b
    for p in a:
        assert 2 <= len(p) <= 6
        assert 32 <= p[0] < 127
        assert all(0 <= t < 256 for t in p)


def test_sample_prefixes_rejects_bad_arguments(tiny_model):
    with pytest.raises(ValueError):
        sample_prefixes(tiny_model, n=0, length=2, seed=0)
    with pytest.raises(ValueError):
        sample_prefixes(tiny_model, n=2, length=5, seed=0, max_length=3)
    with pytest.raises(EmptyInput):
        PrefixSet(())


def test_second_moment_matches_brute_force(tiny_model, byte_corpus):
    moment = estimate_second_moment(tiny_model, byte_corpus, ridge=0.5, max_samples=300, window=20)
    keys = []
    for start in range(0, len(byte_corpus), 20):
        keys.extend(forward(tiny_model, byte_corpus[start:start + 20]).tapped_keys)
        if len(keys) >= 300:
            break
    keys = np.array(keys[:300])
    oracle = sum(np.outer(k, k) for k in keys) / 300 + 0.5 * np.eye(keys.shape[1])
    assert moment.sample_count == 300
    np.testing.assert_allclose(moment.C, oracle, rtol=1e-10, atol=1e-12)


def test_single_sample_second_moment(tiny_model, byte_corpus):
    moment = estimate_second_moment(tiny_model, byte_corpus, ridge=0.01, max_samples=1)
    k = forward(tiny_model, byte_corpus[: tiny_model.config.capacity]).tapped_keys[0]
    np.testing.assert_allclose(moment.C, np.outer(k, k) + 0.01 * np.eye(k.size), atol=1e-13)


def test_self_concatenated_corpus_leaves_the_second_moment_unchanged(tiny_model, byte_corpus):
    corpus = byte_corpus[:96]
    once = estimate_second_moment(tiny_model, corpus, ridge=0.01, window=24)
    twice = estimate_second_moment(tiny_model, corpus + corpus, ridge=0.01, window=24)
    assert twice.sample_count == 2 * once.sample_count == 192
    np.testing.assert_allclose(twice.C, once.C, rtol=0, atol=1e-10)


def test_concatenation_is_invisible_once_max_samples_fills_the_first_copy(tiny_model, byte_corpus):
    corpus = byte_corpus[:100]
    once = estimate_second_moment(tiny_model, corpus, ridge=0.01, max_samples=60)
    twice = estimate_second_moment(tiny_model, corpus + corpus, ridge=0.01, max_samples=60)
    np.testing.assert_array_equal(twice.C, once.C)


def test_basis_samples_give_a_diagonal_second_moment():
    acc = SecondMomentAccumulator(3)
    acc.update(np.diag([1.0, 2.0, 3.0]))
    moment = second_moment_from_accumulator(acc, layer=0, ridge=0.1)
    np.testing.assert_allclose(moment.C, np.diag([1.0, 4.0, 9.0]) / 3 + 0.1 * np.eye(3), atol=1e-15)


def test_default_ridge_is_relative_to_the_mean_diagonal():
    acc = SecondMomentAccumulator(2)
    acc.update(np.array([[2.0, 0.0], [0.0, 4.0]]))
    moment = second_moment_from_accumulator(acc, layer=0)
    assert moment.ridge == pytest.approx(1e-4 * 5.0)


def test_second_moment_errors(tiny_model):
    with pytest.raises(CorpusTooSmall):
        estimate_second_moment(tiny_model, [])
    with pytest.raises(CorpusTooSmall):
        SecondMomentAccumulator(2).mean_outer()
    with pytest.raises(NotSymmetric):
        SecondMoment(C=np.array([[1.0, 2.0], [0.0, 1.0]]), sample_count=1, ridge=0.1, layer=0)


def test_second_moment_round_trip(tmp_path, second_moment):
    path = save_second_moment(second_moment, tmp_path / "c.tlmw")
    loaded = load_second_moment(path)
    np.testing.assert_array_equal(loaded.C, second_moment.C)
    assert loaded.sample_count == second_moment.sample_count
    assert loaded.layer == second_moment.layer
    assert loaded.ridge == second_moment.ridge
