"""
Unit Tests for metrics.py

Accuracy, regret pairing, run summaries and the result writers.
"""

import json
import math

import numpy as np
import pytest

from data_stream import Sample
from errors import ConfigurationError, OutputError, UndefinedMetricError
from metrics import (
    CSV_HEADER,
    ClientRoundRecord,
    RoundMetrics,
    attach_regret,
    default_cond_window,
    eval_accuracy,
    make_run_id,
    ratio_proxy_series,
    read_rounds,
    regret,
    summarize,
    write_outputs,
)
from model_core import CategoryMask, ModelParams


def _series(accs, cond=None):
    """One RoundMetrics per row of per-client accuracies."""
    return [RoundMetrics(round=t, clients=[
        ClientRoundRecord(client=k, acc=a, lambda_mean=1.0, switched=False, buffer_size=3,
                          buffer_cond=cond)
        for k, a in enumerate(row)]) for t, row in enumerate(accs, start=1)]


def _summary(series, **kwargs):
    defaults = dict(run_id='fedkace-s1-abc', method='fedkace', seed=1, config={'seed': 1},
                    decisions={}, t_switch={0: None}, coverage={0: 4})
    defaults.update(kwargs)
    return summarize(series, **defaults)


# ========== Test eval_accuracy ==========

class TestEvalAccuracy:
    """Test suite for eval_accuracy."""

    def _biased_model(self, favourite):
        model = ModelParams.zeros(2, 3, 4)
        model.bH[favourite] = 5.0
        return model

    def test_perfect_and_zero(self):
        test = [Sample(id=i, features=np.zeros(2), label=1) for i in range(3)]
        assert eval_accuracy(self._biased_model(1), CategoryMask.of([0, 1], 4), test) == 1.0
        assert eval_accuracy(self._biased_model(0), CategoryMask.of([0, 1], 4), test) == 0.0

    def test_masked_category_never_predicted(self):
        # the strongest logit belongs to an unseen category
        test = [Sample(id=0, features=np.zeros(2), label=2)]
        assert eval_accuracy(self._biased_model(3), CategoryMask.of([1, 2], 4), test) == 0.0

    def test_fraction(self):
        test = [Sample(id=i, features=np.zeros(2), label=c) for i, c in enumerate([1, 1, 2, 0])]
        assert eval_accuracy(self._biased_model(1), CategoryMask.of([0, 1, 2], 4), test) == 0.5

    def test_empty(self):
        with pytest.raises(UndefinedMetricError):
            eval_accuracy(ModelParams.zeros(2, 3, 4), CategoryMask.of([0], 4), [])


# ========== Test regret ==========

class TestRegret:
    """Test suite for regret and attach_regret."""

    def test_negative_regret_is_kept(self):
        assert math.isclose(regret(0.6, 0.7), -0.1)

    def test_attach(self):
        series = _series([[0.5, 0.7]])
        attach_regret(series, _series([[0.6, 0.6]]))
        assert [rec.regret for rec in series[0].clients] == pytest.approx([0.1, -0.1])
        assert series[0].mean_regret == pytest.approx(0.0)

    def test_missing_reference_row(self):
        with pytest.raises(ConfigurationError):
            attach_regret(_series([[0.5, 0.7]]), _series([[0.6]]))

    def test_duplicate_reference_row(self):
        reference = _series([[0.6, 0.6]])
        reference[0].clients.append(reference[0].clients[0])
        with pytest.raises(ConfigurationError):
            attach_regret(_series([[0.5, 0.7]]), reference)


# ========== Test summarize ==========

class TestSummarize:
    """Test suite for summarize."""

    def test_average_accuracy(self):
        summary = _summary(_series([[0.2, 0.2], [0.4, 0.4]]))
        assert summary.aa == pytest.approx(0.3)
        assert summary.ar is None
        assert summary.rounds == 2

    def test_average_regret(self):
        series = _series([[0.2], [0.4]])
        attach_regret(series, _series([[0.5], [0.5]]))
        assert _summary(series).ar == pytest.approx(0.2)

    def test_empty_series(self):
        summary = _summary([])
        assert summary.aa is None and summary.ar is None
        assert summary.cond_window_mean is None

    def test_condition_window(self):
        series = _series([[0.1]] * 4)
        for t, rm in enumerate(series, start=1):
            rm.clients[0].buffer_cond = float(t)
        assert default_cond_window(4) == 3
        assert _summary(series).cond_window_mean == pytest.approx(3.0)
        assert _summary(series, cond_window=1).cond_window_mean == 4.0

    def test_string_keys(self):
        data = _summary(_series([[0.1]]), t_switch={0: 3, 1: None}).to_dict()
        assert data['t_switch'] == {'0': 3, '1': None}

    def test_run_id(self):
        a = make_run_id('fedkace', 1, {'seed': 1, 'output_dir': 'x'})
        b = make_run_id('fedkace', 1, {'seed': 1, 'output_dir': 'y'})
        assert a == b
        assert a.startswith('fedkace-s1-') and len(a.split('-')[-1]) == 10
        assert make_run_id('fedkace', 1, {'seed': 2}) != a

    def test_ratio_proxy_absent_without_tracking(self):
        assert ratio_proxy_series(_series([[0.1, 0.2]])) is None
        assert _summary(_series([[0.1]])).to_dict()["ratio_proxy"] is None

    def test_ratio_proxy_client_means(self):
        series = _series([[0.1, 0.2], [0.3, 0.4]])
        series[1].clients[0].ratio_output, series[1].clients[0].ratio_full = 1.0, 2.0
        series[1].clients[1].ratio_output, series[1].clients[1].ratio_full = 3.0, 6.0
        assert ratio_proxy_series(series) == [{"round": 2, "output_layer": 2.0, "full_model": 4.0}]
        assert _summary(series).ratio_proxy[0]["full_model"] == 4.0


# ========== Test write_outputs ==========

class TestWriteOutputs:
    """Test suite for write_outputs and read_rounds."""

    def test_header_only_for_empty_run(self, tmp_path):
        csv_path, json_path = write_outputs(tmp_path / "run", [], _summary([]))
        assert csv_path.read_text() == ','.join(CSV_HEADER) + '\n'
        assert json.loads(json_path.read_text())['aa'] is None

    def test_one_row_per_round_and_client(self, tmp_path):
        series = _series([[0.25, 0.5, 0.75]] * 4, cond=2.0)
        csv_path, _ = write_outputs(tmp_path, series, _summary(series))
        rows = read_rounds(csv_path)
        assert len(rows) == 12
        assert rows[0]['regret'] == ''
        assert rows[1]['acc'] == '0.5'
        assert rows[0]['switched'] == '0'

    def test_full_precision(self, tmp_path):
        series = _series([[1 / 3]])
        csv_path, _ = write_outputs(tmp_path, series, _summary(series))
        assert float(read_rounds(csv_path)[0]['acc']) == 1 / 3

    def test_rewrite_is_byte_identical(self, tmp_path):
        series = _series([[0.1, 0.2], [0.3, 0.4]])
        first = [p.read_bytes() for p in write_outputs(tmp_path / "a", series, _summary(series))]
        second = [p.read_bytes() for p in write_outputs(tmp_path / "b", series, _summary(series))]
        assert first == second

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OutputError) as exc:
            write_outputs(blocker / "run", [], _summary([]))
        assert exc.value.path == blocker / "run"
