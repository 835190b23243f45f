import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iotsynth.durations import (DurationModel, duration_to_token, durations_to_tokens, fit_duration_partitions,
                                sample_duration)
from iotsynth.errors import InvalidTokenError
from oracles import optimal_kmeans_1d

MAGNITUDES = [0.001] * 10 + [1.0] * 10 + [60.0] * 10


def test_three_magnitudes_three_partitions():
    m = fit_duration_partitions(MAGNITUDES, 3)
    assert m.k == 3
    assert [sorted(set(p)) for p in m.members] == [[0.001], [1.0], [60.0]]
    assert m.centroids == sorted(m.centroids)


def test_all_equal_single_partition(caplog):
    with caplog.at_level(logging.WARNING):
        m = fit_duration_partitions([0.5] * 20, 8)
    assert m.k == 1 and m.members == [[0.5] * 20]
    assert "reducing k" in caplog.text


def test_zero_is_clamped_to_floor():
    m = fit_duration_partitions([0.0, 0.0, 1.0, 1.0], 2)
    assert m.members[0] == [1e-6, 1e-6]
    assert m.centroids[0] == pytest.approx(-6.0)


def test_fit_preconditions():
    with pytest.raises(ValueError):
        fit_duration_partitions([], 3)
    with pytest.raises(ValueError):
        fit_duration_partitions([1.0], 0)


def test_token_of_member():
    m = fit_duration_partitions(MAGNITUDES, 3)
    assert duration_to_token(m, 60.0) == 2 and duration_to_token(m, 1.0) == 1


def test_midpoint_goes_to_lower_index():
    m = DurationModel(2, [0.0, 2.0], [[1.0], [100.0]])
    assert duration_to_token(m, 10.0) == 0


def test_zero_maps_to_smallest_partition():
    m = fit_duration_partitions(MAGNITUDES, 3)
    assert duration_to_token(m, 0.0) == 0


def test_single_member_noise_band():
    m = DurationModel(1, [0.0], [[1.0]])
    rng = np.random.default_rng(0)
    xs = [sample_duration(m, 0, rng) for _ in range(2000)]
    assert min(xs) >= 0.9 and max(xs) <= 1.1
    assert max(xs) - min(xs) > 0.15     # actually spread, not constant


def test_floor_member_noise_band():
    m = fit_duration_partitions([0.0] * 5, 1)
    rng = np.random.default_rng(1)
    xs = [sample_duration(m, 0, rng) for _ in range(500)]
    assert min(xs) >= 0.9e-6 and max(xs) <= 1.1e-6


def test_sampling_is_seeded():
    m = fit_duration_partitions(MAGNITUDES, 3)
    a = [sample_duration(m, t % 3, np.random.default_rng(5)) for t in range(10)]
    b = [sample_duration(m, t % 3, np.random.default_rng(5)) for t in range(10)]
    assert a == b


@pytest.mark.parametrize("token", [-1, 3, 99])
def test_bad_token(token):
    m = fit_duration_partitions(MAGNITUDES, 3)
    with pytest.raises(InvalidTokenError):
        sample_duration(m, token, np.random.default_rng(0))


def test_serialization_round_trip():
    m = fit_duration_partitions(MAGNITUDES + [5.0, 7.0], 4)
    assert DurationModel.from_dict(m.to_dict()) == m


def _sse(groups):
    return sum(float(((np.asarray(g) - np.mean(g)) ** 2).sum()) for g in groups)


# equal-sized, well separated magnitude groups: the quantile start already sits
# inside each group, so the local search must land on the global optimum
@settings(deadline=None, max_examples=60)
@given(st.lists(st.sampled_from([1e-4, 1e-2, 1.0, 1e2, 1e4]), min_size=1, max_size=5, unique=True),
       st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_fit_matches_optimal_kmeans_on_separated_data(centers, n, seed):
    rng = np.random.default_rng(seed)
    values = [float(c * rng.uniform(0.9, 1.1)) for c in centers for _ in range(n)]
    k = len(centers)
    m = fit_duration_partitions(values, k)
    oracle = optimal_kmeans_1d(np.log10(values), k)
    assert [sorted(np.log10(p).round(12)) for p in m.members] == [sorted(np.round(g, 12)) for g in oracle]


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(1e-5, 300, allow_nan=False), min_size=1, max_size=40), st.integers(1, 6))
def test_fit_is_a_lloyd_fixed_point(durations, k):
    m = fit_duration_partitions(durations, k)
    logs = [np.log10(p) for p in m.members]
    for c, g in zip(m.centroids, logs):
        assert c == pytest.approx(np.mean(g), abs=1e-9)
    oracle = optimal_kmeans_1d(np.log10(durations), m.k)
    assert _sse(logs) >= _sse(oracle) - 1e-9


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(0, 300, allow_nan=False), min_size=1, max_size=80), st.integers(1, 10))
def test_partition_invariants(durations, k):
    m = fit_duration_partitions(durations, k)
    assert all(len(p) > 0 for p in m.members)
    assert list(m.centroids) == sorted(m.centroids)
    assert sum(len(p) for p in m.members) == len(durations)
    # every member maps back to its own partition
    for t, pool in enumerate(m.members):
        assert set(durations_to_tokens(m, pool).tolist()) == {t}
    assert m == fit_duration_partitions(durations, k)


@settings(deadline=None, max_examples=30)
@given(st.lists(st.floats(0, 300, allow_nan=False), min_size=1, max_size=50), st.integers(1, 6),
       st.integers(0, 1000))
def test_samples_within_member_bounds(durations, k, seed):
    m = fit_duration_partitions(durations, k)
    rng = np.random.default_rng(seed)
    for t in range(m.k):
        lo, hi = 0.9 * min(m.members[t]), 1.1 * max(m.members[t])
        for _ in range(20):
            assert lo <= sample_duration(m, t, rng) <= hi


def test_samples_map_back_on_separated_corpus():
    m = fit_duration_partitions(MAGNITUDES + [0.002, 1.5, 45.0], 3)
    rng = np.random.default_rng(3)
    for t in range(3):
        assert all(duration_to_token(m, sample_duration(m, t, rng)) == t for _ in range(200))
