"""
Integration Tests for federation.py

Full rounds across data_stream, replay_trainer, kernel_buffer,
switch_monitor and metrics.
"""

import json
import logging
from unittest.mock import patch

import numpy as np
import pytest

from data_stream import build_schedule
from errors import ContractViolationError, RunAbortedError, TrainingDivergedError
from federation import (
    VARIANTS,
    MethodVariant,
    init_states,
    resolve_aggregation,
    resolve_lambda_mode,
    run_experiment,
    run_round,
    run_with_reference,
)
from metrics import read_rounds, write_outputs
from model_core import CategoryMask
from replay_trainer import LambdaMode


def _assert_same_model(a, b):
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)


# ========== Test method registry ==========

class TestMethodVariant:
    """Test suite for MethodVariant and the variant table."""

    @pytest.mark.parametrize("name,expected", [
        ("FedKACE", MethodVariant.FEDKACE),
        ("lkc", MethodVariant.LOCALKACE),
        ("Centralised", MethodVariant.CENTRALIZED),
        ("fedavg-no-buffer", MethodVariant.FEDAVG),
        ("AS_6", MethodVariant.AS6),
    ])
    def test_parse(self, name, expected):
        assert MethodVariant.parse(name) == expected

    def test_every_variant_has_a_spec(self):
        assert set(VARIANTS) == set(MethodVariant)

    def test_aggregation_override(self):
        assert resolve_aggregation(VARIANTS[MethodVariant.FEDAVG], 'auto') == 'weighted'
        assert resolve_aggregation(VARIANTS[MethodVariant.FEDKACE], 'weighted') == 'weighted'
        assert resolve_aggregation(VARIANTS[MethodVariant.LOCALKACE], 'mean') is None

    def test_replay_weight_override(self):
        fedkace = VARIANTS[MethodVariant.FEDKACE]
        assert resolve_lambda_mode(fedkace, "auto") == LambdaMode.ADAPTIVE
        assert resolve_lambda_mode(fedkace, "zero") == LambdaMode.ZERO
        assert resolve_lambda_mode(VARIANTS[MethodVariant.AS4], "auto") == LambdaMode.FIXED
        # methods without replay keep their own weight
        fedavg = VARIANTS[MethodVariant.FEDAVG]
        assert resolve_lambda_mode(fedavg, "zero") == fedavg.lambda_mode


# ========== Test run_round ==========

class TestRunRound:
    """Test suite for run_round."""

    def test_round_order_enforced(self, tiny_config):
        server, clients = init_states(tiny_config, MethodVariant.FEDKACE)
        with pytest.raises(ContractViolationError):
            run_round(server, clients, 2, MethodVariant.FEDKACE, tiny_config)

    def test_aggregate_is_mean_of_local_models(self, tiny_config):
        cfg = tiny_config.with_overrides(epochs=1)
        server, clients = init_states(cfg, MethodVariant.FEDKACE)
        run_round(server, clients, 1, MethodVariant.FEDKACE, cfg)
        a, b = clients[0].model, clients[1].model
        for avg, x, y in zip(server.global_model.arrays(), a.arrays(), b.arrays()):
            np.testing.assert_allclose(avg, (x + y) / 2, rtol=1e-12, atol=1e-15)
        assert server.round == 1

    def test_first_round_state(self, tiny_config):
        server, clients = init_states(tiny_config, MethodVariant.FEDKACE)
        metrics = run_round(server, clients, 1, MethodVariant.FEDKACE, tiny_config)
        assert [rec.client for rec in metrics.clients] == [0, 1]
        for client, rec in zip(clients, metrics.clients):
            assert client.seen.active == frozenset(client.schedule[0])
            assert rec.buffer_size == len(client.buffer) <= tiny_config.capacity
            # no historical categories yet, so no replay
            assert rec.lambda_mean == 1.0
            assert not rec.switched

    def test_pool_matches_sequential(self, tiny_config):
        from concurrent.futures import ThreadPoolExecutor

        server_a, clients_a = init_states(tiny_config, MethodVariant.FEDKACE)
        server_b, clients_b = init_states(tiny_config, MethodVariant.FEDKACE)
        with ThreadPoolExecutor(max_workers=2) as pool:
            for t in (1, 2):
                seq = run_round(server_a, clients_a, t, MethodVariant.FEDKACE, tiny_config)
                par = run_round(server_b, clients_b, t, MethodVariant.FEDKACE, tiny_config, pool)
                assert [r.acc for r in seq.clients] == [r.acc for r in par.clients]
        _assert_same_model(server_a.global_model, server_b.global_model)

    def test_client_failure_aborts_round(self, tiny_config):
        server, clients = init_states(tiny_config, MethodVariant.FEDKACE)
        before = server.global_model.copy()
        error = TrainingDivergedError("gradient blew up", {"grad_norms": [float("inf")]})
        with patch('federation.train_round', side_effect=error), \
                patch('federation.get_host_info', return_value={'cpu_count': 1}):
            with pytest.raises(RunAbortedError) as exc:
                run_round(server, clients, 1, MethodVariant.FEDKACE, tiny_config)
        assert set(exc.value.diagnostics) == {0, 1}
        assert exc.value.diagnostics[0]['type'] == 'TrainingDivergedError'
        assert exc.value.diagnostics[0]['grad_norms'] == [float("inf")]
        assert server.round == 0
        _assert_same_model(server.global_model, before)


# ========== Test run_experiment ==========

class TestRunExperiment:
    """Test suite for run_experiment and run_with_reference."""

    @pytest.mark.parametrize("variant", list(MethodVariant))
    def test_every_variant_runs(self, tiny_config, variant):
        result = run_experiment(tiny_config, variant)
        assert len(result.series) == tiny_config.num_rounds
        for rm in result.series:
            assert len(rm.clients) == tiny_config.num_clients
            assert all(0.0 <= rec.acc <= 1.0 for rec in rm.clients)
        assert result.summary.method == variant.value
        assert 0.0 <= result.summary.aa <= 1.0

    def test_single_client_aggregation_is_identity(self, tiny_config):
        cfg = tiny_config.with_overrides(num_clients=1)
        fed = run_experiment(cfg, MethodVariant.FEDKACE)
        local = run_experiment(cfg, MethodVariant.LOCALKACE)
        assert [rm.mean_acc for rm in fed.series] == [rm.mean_acc for rm in local.series]
        _assert_same_model(fed.clients[0].model, local.clients[0].model)

    def test_zero_rounds(self, tiny_config, tmp_path):
        result = run_experiment(tiny_config.with_overrides(num_rounds=0))
        assert result.series == []
        assert result.summary.aa is None
        csv_path, _ = write_outputs(tmp_path, result.series, result.summary)
        assert read_rounds(csv_path) == []

    def test_seen_categories_grow(self, tiny_config):
        result = run_experiment(tiny_config)
        scfg = tiny_config.schedule_config()
        for client in result.clients:
            expected = set()
            for window in build_schedule(scfg, client.client_id):
                expected |= set(window)
            assert client.seen.active == frozenset(expected)
            assert client.buffer.labels() <= client.seen.active

    def test_fedavg_keeps_no_buffer(self, tiny_config):
        result = run_experiment(tiny_config, MethodVariant.FEDAVG)
        for rm in result.series:
            for rec in rm.clients:
                assert rec.buffer_size == 0
                assert rec.buffer_cond is None
                assert rec.lambda_mean == 1.0
        assert result.summary.decisions['aggregation'] == 'weighted'

    def test_fixed_replay_weight(self, tiny_config):
        result = run_experiment(tiny_config, MethodVariant.AS4)
        assert all(rec.lambda_mean == 1.0 for rm in result.series for rec in rm.clients)

    def test_global_inference_variant_never_switches_locally(self, tiny_config):
        result = run_experiment(tiny_config, MethodVariant.FEDAVG)
        assert all(t is None for t in result.summary.t_switch.values())

    def test_switch_never_before_round_three(self, tiny_config):
        result = run_experiment(tiny_config.with_overrides(num_rounds=6))
        for t_switch in result.summary.t_switch.values():
            assert t_switch is None or t_switch >= 3

    def test_deterministic_across_worker_counts(self, tiny_config, tmp_path):
        a = run_experiment(tiny_config.with_overrides(workers=1))
        b = run_experiment(tiny_config.with_overrides(workers=2))
        assert a.summary.run_id == b.summary.run_id
        files_a = write_outputs(tmp_path / "a", a.series, a.summary)
        files_b = write_outputs(tmp_path / "b", b.series, b.summary)
        for x, y in zip(files_a, files_b):
            assert x.read_bytes() == y.read_bytes()

    def test_centralized_has_zero_regret(self, tiny_config):
        result = run_with_reference(tiny_config, MethodVariant.CENTRALIZED)
        assert all(rec.regret == 0.0 for rm in result.series for rec in rm.clients)
        assert result.summary.ar == 0.0
        assert all(rec.buffer_size == 0 for rm in result.series for rec in rm.clients)

    def test_regret_against_centralized(self, tiny_config):
        central = run_experiment(tiny_config, MethodVariant.CENTRALIZED)
        result = run_with_reference(tiny_config, MethodVariant.FEDKACE)
        for rm, ref in zip(result.series, central.series):
            for rec, base in zip(rm.clients, ref.clients):
                assert rec.regret == pytest.approx(base.acc - rec.acc)
        assert result.summary.ar is not None

    def test_cold_start_centralized(self, tiny_config):
        warm = run_experiment(tiny_config, MethodVariant.CENTRALIZED)
        cold = run_experiment(tiny_config.with_overrides(centralized_start='cold'),
                              MethodVariant.CENTRALIZED)
        assert cold.summary.decisions['centralized_start'] == 'cold'
        assert warm.summary.run_id != cold.summary.run_id

    def test_log_base_changes_run_id_only_through_config(self, tiny_config):
        a = run_experiment(tiny_config)
        b = run_experiment(tiny_config.with_overrides(log_base='2'))
        assert a.summary.run_id != b.summary.run_id
        assert b.summary.decisions['log_base'] == '2'

    def test_zero_replay_weight_override(self, tiny_config):
        result = run_experiment(tiny_config.with_overrides(replay_weight='zero'))
        assert result.summary.decisions['lambda_mode'] == 'zero'
        assert all(rec.lambda_mean == 0.0 for rm in result.series[1:] for rec in rm.clients)
        assert run_experiment(tiny_config).summary.run_id != result.summary.run_id

    def test_full_ratio_tracking_reaches_summary(self, tiny_config, tmp_path, caplog):
        with caplog.at_level(logging.DEBUG, logger='federation'):
            result = run_experiment(tiny_config.with_overrides(track_full_ratio=True))
        proxy = result.summary.ratio_proxy
        assert [row['round'] for row in proxy] == [2, 3]
        assert all(row['output_layer'] >= 0 and row['full_model'] >= 0 for row in proxy)
        assert "replay ratio" in caplog.text
        _, json_path = write_outputs(tmp_path / "out", result.series, result.summary)
        assert json.loads(json_path.read_text())['ratio_proxy'] == proxy
        assert run_experiment(tiny_config).summary.ratio_proxy is None

    def test_switch_logged_once_per_client(self, tiny_config, caplog):
        with caplog.at_level(logging.DEBUG):
            result = run_experiment(tiny_config.with_overrides(num_rounds=6))
        switched = [k for k, t in result.summary.t_switch.items() if t is not None]
        info = [r for r in caplog.records if r.levelno >= logging.INFO]
        assert sum("switched to global inference" in r.getMessage() for r in info) == len(switched)
        assert not [r for r in info if r.name == 'switch_monitor']
