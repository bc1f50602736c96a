import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from citune.model import ModelConfig, build_model, encode_batch
from citune.similarity import (
    SimilarityVector,
    TaskEmbedding,
    TaskKey,
    channel_similarities,
    cosine,
    embed_task,
    fuse,
    retrieval_scores,
    retrieve_from_embeddings,
    retrieve_task_id,
    standardize,
    task_similarity,
)
from citune.taskstream import BenchmarkSpec, Sample, TaskDataset, generate_synthetic_benchmark

finite = st.floats(-10, 10, allow_nan=False)


@pytest.fixture(scope="module")
def model():
    return build_model(ModelConfig(seed=2))


@pytest.fixture(scope="module")
def tasks():
    return generate_synthetic_benchmark(BenchmarkSpec(num_tasks=3, samples_per_task=40, val_per_task=8, seed=4))


def emb(tid, v, t, o):
    return TaskEmbedding(tid, np.array(v, float), np.array(t, float), np.array(o, float))


def test_single_sample_embedding(model, tasks):
    s = tasks[0].train[0]
    e = embed_task([s], model, 0)
    img, txt = encode_batch(model, [s])
    assert np.array_equal(e.e_v, img[0]) and np.array_equal(e.e_t, txt[0])
    assert np.array_equal(e.e_o, model.text_encoder.matrix[model.token_id(s.output)])


def test_duplicated_dataset_same_embedding(model, tasks):
    samples = list(tasks[0].train)
    a, b = embed_task(samples, model), embed_task(samples + samples, model)
    np.testing.assert_allclose(a.e_v, b.e_v, atol=1e-13)
    np.testing.assert_allclose(a.e_t, b.e_t, atol=1e-13)


def test_two_sample_mean(model, tasks):
    s1, s2 = tasks[0].train[:2]
    img, _ = encode_batch(model, [s1, s2])
    np.testing.assert_allclose(embed_task([s1, s2], model).e_v, (img[0] + img[1]) / 2, atol=1e-15)


def test_embedding_permutation_invariant(model, tasks):
    samples = list(tasks[1].train)
    rev = embed_task(samples[::-1], model)
    fwd = embed_task(samples, model)
    np.testing.assert_allclose(rev.e_v, fwd.e_v, atol=1e-12)
    np.testing.assert_allclose(rev.e_o, fwd.e_o, atol=1e-12)


def test_empty_dataset_rejected(model):
    with pytest.raises(ValueError):
        embed_task([], model)


def test_nonfinite_embedding_rejected():
    with pytest.raises(ValueError):
        emb(0, [np.nan], [1.0], [1.0])


@pytest.mark.parametrize("a,b,want", [([1, 0], [1, 0], 1.0), ([1, 0], [0, 1], 0.0), ([1, 2], [2, 4], 1.0)])
def test_cosine_examples(a, b, want):
    assert cosine(a, b) == pytest.approx(want, abs=1e-15)


def test_cosine_zero_vectors_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert cosine([0, 0], [0, 0]) == 0.0
    assert "zero" in caplog.text


def test_cosine_length_mismatch():
    with pytest.raises(ValueError):
        cosine([1, 2], [1, 2, 3])


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_cosine_bounded(a, b):
    assert -1.0 <= cosine(a, b) <= 1.0


def test_channels_against_self():
    e = emb(0, [1, 2], [3, 1], [0, 1])
    for channel in channel_similarities(e, [e]):
        assert channel == [pytest.approx(1.0, abs=1e-15)]


def test_channels_orthogonal():
    a, b = emb(1, [1, 0], [1, 0], [1, 0]), emb(0, [0, 1], [0, 1], [0, 1])
    assert channel_similarities(a, [b]) == ([0.0], [0.0], [0.0])


def test_channels_follow_order():
    cur = emb(3, [1, 0], [1, 0], [1, 0])
    p = [emb(0, [1, 0], [1, 1], [0, 1]), emb(1, [0, 1], [1, 0], [1, 1])]
    fwd = channel_similarities(cur, p)
    rev = channel_similarities(cur, p[::-1])
    assert all(f[::-1] == r for f, r in zip(fwd, rev))


def test_standardize_examples():
    assert standardize([2, 4]) == [-1.0, 1.0]
    assert standardize([5]) == [0.0]
    assert standardize([3, 3, 3]) == [0.0, 0.0, 0.0]


@given(st.lists(finite, min_size=2, max_size=8))
def test_standardize_moments(xs):
    z = np.array(standardize(xs))
    assert abs(z.mean()) < 1e-9
    if np.std(xs) > 1e-6:
        assert z.std() == pytest.approx(1.0, abs=1e-9)


def test_fuse_sign_example():
    sv = fuse([1, -1], [1, 1], [1, -1])
    assert sv.raw == [1.0, 1.0] and sv.scores == [1.0, 1.0]


def test_fuse_clamps():
    assert fuse([-0.5], [1.0], [1.0]).scores == [0.0]
    assert fuse([2.4], [1.0], [1.0]).scores == [1.0]
    assert fuse([2.4], [1.0], [1.0]).raw == [2.4]


def test_fuse_length_mismatch():
    with pytest.raises(ValueError):
        fuse([1, 2], [1], [1, 2])


@given(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=6))
def test_fuse_scores_in_unit_interval(rows):
    v, t, o = map(list, zip(*rows))
    sv = fuse(v, t, o)
    assert all(0.0 <= s <= 1.0 for s in sv.scores)
    assert sv.channels == (v, t, o)


def test_duplicate_is_most_similar(model, tasks):
    d0 = tasks[0]
    dup = TaskDataset(3, "dup", d0.train, d0.val)
    prev = [embed_task(d, model) for d in tasks]
    sim = task_similarity(embed_task(dup, model), prev)
    assert sim.score_for(0) == max(sim.scores)
    assert sim.previous_ids == [0, 1, 2]


def test_similarity_vector_missing_id():
    with pytest.raises(KeyError):
        SimilarityVector.constant(2, [0, 1], 0.5).score_for(5)


def key(tid, kv, kt):
    return TaskKey.from_arrays(tid, np.array(kv, float), np.array(kt, float), trainable=False)


def test_retrieve_exact_match_key():
    keys = [key(0, [0, 0, 1], [0, 0, 1]), key(1, [0, 1, 0], [0, 1, 0]), key(2, [1, 0, 0], [1, 0, 0])]
    img, txt = np.array([[1.0, 0, 0]]), np.array([[1.0, 0, 0]])
    assert retrieve_from_embeddings(img, txt, keys) == [2]
    assert retrieve_from_embeddings(img, txt, keys, mode="zproduct") == [2]


def test_retrieve_single_key(model, tasks):
    keys = [key(4, np.ones(32), np.ones(32))]
    assert retrieve_task_id(tasks[0].val[0], model, keys) == 4


def test_retrieve_ties_lowest_id():
    keys = [key(5, [1, 0], [1, 0]), key(2, [1, 0], [1, 0])]
    assert retrieve_from_embeddings(np.array([[1.0, 0]]), np.array([[1.0, 0]]), keys) == [2]


def test_retrieval_unknown_mode():
    with pytest.raises(ValueError):
        retrieval_scores(np.ones((1, 2)), np.ones((1, 2)), [key(0, [1, 0], [1, 0])], mode="nope")


def test_retrieve_needs_keys():
    with pytest.raises(ValueError):
        retrieve_from_embeddings(np.ones((1, 2)), np.ones((1, 2)), [])


def test_retrieval_deterministic_and_total(model, tasks):
    rng = np.random.default_rng(0)
    keys = [key(k, rng.normal(size=32), rng.normal(size=32)) for k in range(3)]
    a = [retrieve_task_id(s, model, keys) for s in tasks[2].val]
    b = [retrieve_task_id(s, model, keys) for s in tasks[2].val]
    assert a == b and set(a) <= {0, 1, 2}


def test_taskkey_json_round_trip():
    k = key(3, [0.1, 0.2], [0.3, 0.4])
    back = TaskKey.from_json(k.to_json())
    assert back.task_id == 3 and back.k_v.values.tolist() == [0.1, 0.2] and not back.k_v.requires_grad
