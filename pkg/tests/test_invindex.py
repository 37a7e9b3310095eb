import numpy as np
import pytest

from hm4.errors import InvalidArgumentError
from hm4.invindex import (build_index, distances_from_scores, rebuild_on_centroid_change, score_query,
                          visit_count)
from hm4.polyvlad import jaccard_distances

from conftest import random_codes


def test_worked_bucket_example():
    # feat_dim=2, D=3: code [3, 0, 2] files into buckets 3, 4 + 0, 8 + 2
    index = build_index(np.array([[3, 0, 2]]), 2)
    assert index.W == 12
    filled = [w for w in range(index.W) if len(index.bucket(w))]
    assert filled == [3, 4, 10]


def test_each_centroid_appears_once_per_dimension(rng):
    cents = random_codes(rng, 30, 12, 4)
    index = build_index(cents, 4)
    assert index.n_entries == 30 * 12
    for m in range(12):
        got = np.concatenate([index.bucket(8 * m + b) for b in range(8)])
        assert sorted(got) == list(range(30))


def test_buckets_sorted(rng):
    index = build_index(random_codes(rng, 50, 6, 2), 2)
    for w in range(index.W):
        b = index.bucket(w)
        assert np.all(np.diff(b) > 0)


def test_scores_match_pairwise_distances(rng):
    cents = random_codes(rng, 40, 32, 8)
    index = build_index(cents, 8)
    for _ in range(20):
        q = random_codes(rng, 1, 32, 8)[0]
        d = distances_from_scores(score_query(index, q), 32)
        np.testing.assert_array_equal(d, jaccard_distances(cents, q))


def test_query_equal_to_centroid_scores_full(rng):
    cents = random_codes(rng, 10, 16, 4)
    s = score_query(build_index(cents, 4), cents[3])
    assert s[3] == 16


def test_query_length_mismatch(rng):
    index = build_index(random_codes(rng, 3, 8, 4), 4)
    with pytest.raises(InvalidArgumentError):
        score_query(index, np.zeros(7, dtype=np.uint8))


def test_heterogeneous_lengths_rejected():
    with pytest.raises(InvalidArgumentError):
        build_index([[0, 1, 2], [0, 1]], 2)


def test_out_of_range_code_rejected():
    with pytest.raises(InvalidArgumentError):
        build_index(np.array([[0, 4]]), 2)


def test_visit_count_uniform_bound():
    rng = np.random.default_rng(7)
    K, D, fd = 200, 256, 16
    index = build_index(random_codes(rng, K, D, fd), fd)
    visits = [visit_count(index, q) for q in random_codes(rng, 50, D, fd)]
    assert np.mean(visits) <= 2 * K * D / (2 * fd)


@pytest.mark.parametrize("seed", range(5))
def test_incremental_rebuild_equals_fresh_build(seed):
    rng = np.random.default_rng(seed)
    cents = random_codes(rng, 25, 20, 4)
    index = build_index(cents, 4)
    changed = {}
    for k in rng.choice(25, size=6, replace=False):
        new = cents[k].copy()
        dims = rng.choice(20, size=rng.integers(0, 8), replace=False)
        new[dims] = rng.integers(0, 8, size=len(dims))
        changed[int(k)] = new
        cents[k] = new
    got = rebuild_on_centroid_change(index, changed)
    fresh = build_index(cents, 4)
    np.testing.assert_array_equal(got.offsets, fresh.offsets)
    np.testing.assert_array_equal(got.ids, fresh.ids)
    np.testing.assert_array_equal(got.codes, fresh.codes)


def test_rebuild_accepts_pairs_and_empty(rng):
    cents = random_codes(rng, 5, 4, 2)
    index = build_index(cents, 2)
    same = rebuild_on_centroid_change(index, [])
    np.testing.assert_array_equal(same.ids, index.ids)
    with pytest.raises(InvalidArgumentError):
        rebuild_on_centroid_change(index, [(9, cents[0])])
