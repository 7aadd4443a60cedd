"""
Unit Tests for data_stream.py

Schedules, per-round sample generation, test sets and the dataset dump.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from data_stream import (
    ScheduleConfig,
    build_schedule,
    client_permutation,
    coverage_round,
    draw_round_data,
    dump_client_data,
    expected_coverage_round,
    load_client_data,
    stack_samples,
    window_start,
)
from data_stream import test_set as fixed_test_set
from errors import ConfigurationError, OutputError


# ========== Test build_schedule ==========

class TestBuildSchedule:
    """Test suite for build_schedule."""

    def test_overlap_two_of_five(self):
        cfg = ScheduleConfig(c_max=100, window=5, overlap=2, num_clients=3, num_rounds=40)
        for k in range(3):
            sched = build_schedule(cfg, k)
            assert len(sched) == 40
            for a, b in zip(sched, sched[1:]):
                assert len(set(a) & set(b)) == 2

    def test_full_overlap_repeats_for_window_rounds(self):
        cfg = ScheduleConfig(c_max=20, window=5, overlap=5, num_rounds=12)
        sched = build_schedule(cfg, 0)
        assert sched[0] == sched[1] == sched[2] == sched[3] == sched[4]
        assert not set(sched[4]) & set(sched[5])
        assert sched[5] == sched[9]
        assert sched[10] != sched[9]

    def test_zero_overlap_is_disjoint(self):
        cfg = ScheduleConfig(c_max=20, window=5, overlap=0, num_rounds=8)
        sched = build_schedule(cfg, 2)
        for a, b in zip(sched, sched[1:]):
            assert not set(a) & set(b)
        # the cyclic list wraps after C_max / w rounds
        assert sched[0] == sched[4]

    def test_windows_follow_client_permutation(self):
        cfg = ScheduleConfig(c_max=10, window=3, overlap=1, num_rounds=3)
        perm = list(client_permutation(cfg, 1))
        sched = build_schedule(cfg, 1)
        assert sched[0] == tuple(perm[0:3])
        assert sched[1] == tuple(perm[2:5])

    def test_clients_differ(self):
        cfg = ScheduleConfig(c_max=20, num_rounds=2)
        assert build_schedule(cfg, 0) != build_schedule(cfg, 1)

    def test_deterministic(self):
        cfg = ScheduleConfig(seed=5)
        assert build_schedule(cfg, 3) == build_schedule(cfg, 3)

    def test_zero_rounds(self):
        assert build_schedule(ScheduleConfig(num_rounds=0), 0) == []

    @pytest.mark.parametrize("kwargs", [
        {"overlap": 6, "window": 5},
        {"window": 21, "c_max": 20},
        {"window": 0},
        {"num_clients": 0},
        {"overlap": -1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            build_schedule(ScheduleConfig(**kwargs), 0)

    @settings(max_examples=60, deadline=None)
    @given(
        c_max=st.integers(2, 40),
        data=st.data(),
    )
    def test_adjacent_overlap_property(self, c_max, data):
        window = data.draw(st.integers(1, c_max))
        overlap = data.draw(st.integers(0, window - 1))
        # adjacent windows only meet on the overlap when they cannot wrap onto each other
        if 2 * window - overlap > c_max:
            return
        cfg = ScheduleConfig(c_max=c_max, window=window, overlap=overlap, num_rounds=6)
        sched = build_schedule(cfg, 0)
        for a, b in zip(sched, sched[1:]):
            assert len(set(a) & set(b)) == overlap


class TestWindowStart:
    """Test suite for window_start."""

    def test_stride(self):
        cfg = ScheduleConfig(c_max=20, window=5, overlap=2)
        assert [window_start(cfg, t) for t in (1, 2, 3, 7, 8)] == [0, 3, 6, 18, 1]

    def test_repeat_then_jump(self):
        cfg = ScheduleConfig(c_max=20, window=5, overlap=5)
        assert [window_start(cfg, t) for t in range(1, 12)] == [0] * 5 + [5] * 5 + [10]


# ========== Test coverage ==========

class TestCoverage:
    """Test suite for coverage_round and expected_coverage_round."""

    def test_covered_by_expected_round(self):
        for overlap in (0, 2, 4, 5):
            cfg = ScheduleConfig(c_max=20, window=5, overlap=overlap, num_rounds=80)
            sched = build_schedule(cfg, 0)
            assert coverage_round(sched, 20) == expected_coverage_round(cfg)

    def test_never_covered(self):
        assert coverage_round([(0, 1), (1, 2)], 5) == 0


# ========== Test draw_round_data ==========

class TestDrawRoundData:
    """Test suite for draw_round_data."""

    def test_counts_and_labels(self, schedule_config):
        window = build_schedule(schedule_config, 0)[0]
        task = draw_round_data(schedule_config, 0, 1, window)
        assert len(task) == schedule_config.n_per_cat * len(window)
        assert {s.label for s in task.samples} == set(window)
        assert task.categories == window

    def test_ids_disjoint_across_clients_and_rounds(self, schedule_config):
        ids = []
        for k in range(schedule_config.num_clients):
            for t, window in enumerate(build_schedule(schedule_config, k), start=1):
                ids.extend(s.id for s in draw_round_data(schedule_config, k, t, window).samples)
        assert len(ids) == len(set(ids))
        test_ids = {s.id for s in fixed_test_set(schedule_config, range(schedule_config.c_max))}
        assert not set(ids) & test_ids
        assert min(test_ids) >= schedule_config.test_id_base > max(ids)

    def test_recurring_category_gets_fresh_samples(self):
        cfg = ScheduleConfig(c_max=20, window=5, overlap=5, num_rounds=3)
        window = build_schedule(cfg, 0)[0]
        first = draw_round_data(cfg, 0, 1, window)
        second = draw_round_data(cfg, 0, 2, window)
        assert not np.allclose(first.samples[0].features, second.samples[0].features)

    def test_deterministic(self, schedule_config):
        a = draw_round_data(schedule_config, 1, 2, (0, 3))
        b = draw_round_data(schedule_config, 1, 2, (0, 3))
        for x, y in zip(a.samples, b.samples):
            assert x.id == y.id
            np.testing.assert_array_equal(x.features, y.features)


# ========== Test test_set ==========

class TestTestSet:
    """Test suite for test_set."""

    def test_fixed_per_category(self, schedule_config):
        both = fixed_test_set(schedule_config, [1, 4])
        only = fixed_test_set(schedule_config, [4])
        assert len(both) == 2 * schedule_config.n_test_per_cat
        np.testing.assert_array_equal(both[-1].features, only[-1].features)
        assert [s.label for s in both[:schedule_config.n_test_per_cat]] == [1] * 4

    def test_empty_categories(self, schedule_config):
        with pytest.raises(ConfigurationError):
            fixed_test_set(schedule_config, [])


class TestStackSamples:
    """Test suite for stack_samples."""

    def test_shapes(self, make_samples):
        X, y = stack_samples(make_samples([0, 1, 1]))
        assert X.shape == (3, 4)
        assert list(y) == [0, 1, 1]

    def test_empty(self):
        X, y = stack_samples([])
        assert len(y) == 0


# ========== Test dataset dump ==========

class TestDump:
    """Test suite for dump_client_data and load_client_data."""

    def test_reload_matches_stream(self, schedule_config, tmp_path):
        path = tmp_path / "dump" / "client0.csv"
        count = dump_client_data(path, schedule_config, 0)
        records = load_client_data(path)
        assert count == len(records) == (schedule_config.num_rounds * schedule_config.window
                                         * schedule_config.n_per_cat)
        window = build_schedule(schedule_config, 0)[0]
        first = draw_round_data(schedule_config, 0, 1, window).samples[0]
        round_index, loaded = records[0]
        assert round_index == 1
        assert loaded.id == first.id and loaded.label == first.label
        np.testing.assert_array_equal(loaded.features, first.features)

    def test_unwritable_path(self, schedule_config, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OutputError):
            dump_client_data(blocker / "client0.csv", schedule_config, 0)
