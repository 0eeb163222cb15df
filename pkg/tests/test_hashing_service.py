import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError
from scipy import stats

from pcsketch.exceptions import MemoryGuardError, SerializationError
from pcsketch.models import SketchParams
from pcsketch.services.hashing_service import HashingService, hashing_service


def test_same_params_give_identical_tables(params):
    first = hashing_service.build_hash_family(params)
    second = HashingService().build_hash_family(params)

    np.testing.assert_array_equal(first.buckets, second.buckets)
    np.testing.assert_array_equal(first.signs, second.signs)


def test_different_seeds_give_different_tables(params):
    first = hashing_service.build_hash_family(params)
    second = hashing_service.build_hash_family(params.with_seed(params.seed + 1))

    assert not np.array_equal(first.buckets, second.buckets)


def test_table_shapes_and_ranges(family, params):
    assert family.buckets.shape == (params.k, params.d)
    assert family.signs.shape == (params.k, params.d)
    assert family.buckets.min() >= 0 and family.buckets.max() < params.b
    assert set(np.unique(family.signs)) <= {-1, 1}


def test_tables_are_read_only(family):
    with pytest.raises(ValueError):
        family.buckets[0, 0] = 0
    with pytest.raises(ValueError):
        family.signs[0, 0] = 1


def test_k1_b2_d1_builds():
    family = hashing_service.build_hash_family(SketchParams(d=1, k=1, b=2, seed=0))

    assert family.buckets.shape == (1, 1)
    assert family.buckets[0, 0] in (0, 1)
    assert family.signs[0, 0] in (-1, 1)


@given(k=st.integers(min_value=1, max_value=99).filter(lambda k: k % 2 == 0))
def test_even_k_is_rejected(k):
    with pytest.raises(ValidationError):
        SketchParams(d=10, k=k, b=4)


@given(b=st.integers(min_value=1, max_value=1001).filter(lambda b: b % 2 == 1))
def test_odd_b_is_rejected(b):
    with pytest.raises(ValidationError):
        SketchParams(d=10, k=3, b=b)


def test_memory_guard():
    # GIVEN
    service = HashingService(max_entries=100)
    params = SketchParams(d=101, k=1, b=2)

    # WHEN / THEN
    with pytest.raises(MemoryGuardError):
        service.build_hash_family(params)
    assert service.build_hash_family(params, allow_large=True).params == params


def test_family_cache_returns_shared_instance(params):
    service = HashingService(cache_size=2)

    first = service.family_for(params)
    assert service.family_for(params) is first

    service.family_for(params.with_seed(1))
    service.family_for(params.with_seed(2))
    assert service.family_for(params) is not first


def test_serialized_family_rebuilds_identically(family, tmp_path):
    # GIVEN
    path = tmp_path / "family.pcsh"

    # WHEN
    hashing_service.save_family(family, path)
    loaded = hashing_service.load_family(path)

    # THEN
    assert loaded.params == family.params
    np.testing.assert_array_equal(loaded.buckets, family.buckets)
    np.testing.assert_array_equal(loaded.signs, family.signs)


def test_corrupt_family_blobs_are_rejected(family):
    blob = hashing_service.serialize_family(family)

    with pytest.raises(SerializationError):
        hashing_service.deserialize_family(b"XXXXX" + blob[5:])
    with pytest.raises(SerializationError):
        hashing_service.deserialize_family(blob[:-1])
    with pytest.raises(SerializationError):
        hashing_service.deserialize_family(blob[:10])


def test_buckets_are_uniform():
    family = hashing_service.build_hash_family(SketchParams(d=100_000, k=1, b=16, seed=3))

    counts = np.bincount(family.buckets[0], minlength=16)

    assert stats.chisquare(counts).pvalue > 1e-4


def test_signs_are_balanced_and_independent_of_buckets():
    d = 100_000
    family = hashing_service.build_hash_family(SketchParams(d=d, k=1, b=16, seed=5))
    signs = family.signs[0].astype(float)

    assert stats.binomtest(int(np.sum(signs > 0)), d, 0.5).pvalue > 1e-3
    assert abs(np.corrcoef(signs, family.buckets[0])[0, 1]) < 4 / np.sqrt(d)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**64 - 1))
def test_rows_are_not_identical(seed):
    family = hashing_service.build_hash_family(SketchParams(d=256, k=3, b=32, seed=seed))

    assert not np.array_equal(family.buckets[0], family.buckets[1])
    assert not np.array_equal(family.signs[1], family.signs[2])
