import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from genemamba.errors import ConfigError, DataError, InputError, StateError
from genemamba.tdigest import TDigest, td_create, td_insert, td_merge, td_quantile

finite = st.floats(-1e6, 1e6, allow_nan=False)


def filled(values, compression=100):
    return TDigest(compression).update_many(values)


def test_create_bounds():
    assert len(td_create(100)) == 0
    assert td_create(20).total_weight == 0
    with pytest.raises(ConfigError):
        td_create(5)


def test_insert_small_exact():
    d = td_create()
    for v in (1, 2, 3):
        td_insert(d, v)
    assert td_quantile(d, 0.5) == 2
    assert d.total_weight == 3


def test_single_value_any_quantile():
    d = td_insert(td_create(), 7.25)
    for q in (0.0, 0.3, 0.5, 1.0):
        assert d.quantile(q) == 7.25


def test_insert_rejects_non_finite():
    with pytest.raises(InputError):
        td_insert(td_create(), float("nan"))
    with pytest.raises(InputError):
        TDigest().update_many([1.0, math.inf])


def test_quantile_errors():
    with pytest.raises(StateError):
        td_create().quantile(0.5)
    d = filled([1, 2])
    with pytest.raises(InputError):
        d.quantile(1.5)
    with pytest.raises(InputError):
        d.quantile(-0.1)


def test_small_examples():
    d = filled([2, 4, 6])
    assert d.quantile(0.5) == 4
    assert d.quantile(0.0) == 2
    assert d.quantile(1.0) == 6


def test_uniform_median_against_sorted_oracle():
    x = np.random.default_rng(0).uniform(size=10_000)
    d = filled(x)
    assert abs(d.median() - 0.5) <= 0.02
    assert abs(d.median() - np.median(x)) <= 0.02


def test_exponential_median_near_ln2():
    x = np.random.default_rng(1).exponential(size=1000)
    assert abs(filled(x).median() - math.log(2)) <= 0.05


def test_centroid_count_bounded():
    d = filled(np.random.default_rng(2).normal(size=50_000))
    assert len(d) <= math.ceil(d.compression) + 10


def test_merge_identity_and_accuracy():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=4000), rng.lognormal(size=3000)
    dx, dy = filled(x), filled(y)
    assert td_merge(td_create(), dx).median() == pytest.approx(dx.median())
    m = td_merge(dx, dy)
    assert m.total_weight == 7000
    pooled = np.sort(np.concatenate([x, y]))
    rank = np.searchsorted(pooled, m.median())
    assert abs(rank - 3500) <= 0.01 * 7000
    assert abs(td_merge(dy, dx).median() - m.median()) <= 0.05


def test_merge_leaves_inputs_untouched():
    a, b = filled([1, 2, 3]), filled([10, 11])
    before = a.to_bytes()
    a.merge(b)
    assert a.to_bytes() == before


def test_merge_compression_mismatch():
    with pytest.raises(ConfigError):
        td_merge(TDigest(50), TDigest(100))


def test_serialization_round_trip():
    d = filled(np.random.default_rng(4).normal(size=3000))
    raw = d.to_bytes()
    e = TDigest.from_bytes(raw)
    assert e.centroids == d.centroids
    assert e.to_bytes() == raw
    assert e.compression == d.compression
    assert len(raw) == 16 + 16 * len(d)


def test_deserialize_rejects_bad_records():
    raw = filled([1, 2, 3]).to_bytes()
    with pytest.raises(DataError):
        TDigest.from_bytes(raw[:-3])
    with pytest.raises(DataError):
        TDigest.from_bytes(raw[:5])


@given(st.lists(finite, min_size=1, max_size=100), st.floats(0, 1))
def test_exact_when_small(values, q):
    d = filled(values)
    assert d.quantile(q) == pytest.approx(float(np.quantile(values, q)), rel=1e-12, abs=1e-9)


@given(st.lists(finite, min_size=1, max_size=600), st.lists(st.floats(0, 1), min_size=2, max_size=10))
def test_monotone_and_bounded(values, qs):
    d = filled(values, 20)
    qs = sorted(qs)
    est = [d.quantile(q) for q in qs]
    assert all(a <= b for a, b in zip(est, est[1:]))
    assert min(values) <= est[0] and est[-1] <= max(values)


@given(st.lists(finite, min_size=1, max_size=400))
def test_structure_invariants(values):
    d = filled(values, 20)
    means = [m for m, _ in d.centroids]
    weights = [w for _, w in d.centroids]
    assert all(a < b for a, b in zip(means, means[1:]))
    assert sum(weights) == pytest.approx(len(values))
    assert all(w > 0 for w in weights)


@given(st.integers(0, 2**32 - 1))
def test_permutation_robustness(seed):
    rng = np.random.default_rng(seed)
    x = rng.gamma(2.0, size=3000)
    a, b = filled(x).median(), filled(rng.permutation(x)).median()
    s = np.sort(x)
    ra, rb = np.searchsorted(s, a), np.searchsorted(s, b)
    assert abs(ra - rb) <= 0.01 * x.size
