"""
Pytest Configuration and Shared Fixtures

This module contains pytest configuration, fixtures, and test utilities
that are shared across all test modules.
"""

import importlib.util
import sys
from pathlib import Path
from unittest.mock import MagicMock

import numpy as np
import pytest

# Add parent directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent))

from config import ExperimentConfig
from data_stream import Sample, ScheduleConfig
from kernel_buffer import Buffer, ScoredItem
from model_core import CategoryMask, ModelParams


def _plugin_available(module_name: str) -> bool:
    """Check whether an optional pytest plugin is importable."""

    return importlib.util.find_spec(module_name) is not None


def pytest_addoption(parser):
    """Register placeholder options when optional plugins are missing."""

    if not _plugin_available("pytest_cov"):
        parser.addoption("--cov", action="store", default=None, help="(placeholder)")
        parser.addoption(
            "--cov-report", action="append", default=[], help="(placeholder)"
        )
        parser.addoption(
            "--cov-fail-under", action="store", default=None, help="(placeholder)"
        )

    if not _plugin_available("pytest_html"):
        parser.addoption("--html", action="store", default=None, help="(placeholder)")
        parser.addoption(
            "--self-contained-html",
            action="store_true",
            default=False,
            help="(placeholder)",
        )


# ========== Model Fixtures ==========

@pytest.fixture
def rng():
    """Fixed-seed generator for test data."""
    return np.random.default_rng(1234)


@pytest.fixture
def small_model(rng):
    """A 4-input, 6-hidden, 5-output model."""
    return ModelParams.initialize(rng, feature_dim=4, hidden_dim=6, c_max=5)


@pytest.fixture
def full_mask():
    """All five categories of small_model active."""
    return CategoryMask.of(range(5), 5)


@pytest.fixture
def make_samples(rng):
    """Factory for labeled samples with consecutive ids."""
    def _make(labels, feature_dim=4, start_id=0):
        return [Sample(id=start_id + i, features=rng.standard_normal(feature_dim), label=int(c))
                for i, c in enumerate(labels)]
    return _make


@pytest.fixture
def make_item():
    """Factory for a ScoredItem with a given embedding and probability vector."""
    def _make(sample_id, label, g_hat, probs):
        g = np.asarray(g_hat, dtype=float)
        return ScoredItem(sample=Sample(id=sample_id, features=np.zeros(1), label=label),
                          g_hat=g / np.linalg.norm(g), probs=np.asarray(probs, dtype=float))
    return _make


@pytest.fixture
def empty_buffer():
    return Buffer(capacity=10)


# ========== Configuration Fixtures ==========

@pytest.fixture
def schedule_config():
    """Small streaming environment."""
    return ScheduleConfig(c_max=8, num_clients=3, num_rounds=6, window=3, overlap=1,
                          n_per_cat=6, n_test_per_cat=4, feature_dim=4, seed=7)


@pytest.fixture
def tiny_config(tmp_path):
    """Experiment small enough to run in well under a second."""
    return ExperimentConfig(num_clients=2, num_rounds=3, c_max=6, window=3, overlap=1,
                            capacity=12, epochs=2, batch_size=8, feature_dim=4, hidden_dim=6,
                            n_per_cat=8, n_test_per_cat=4, seed=3, workers=1,
                            output_dir=str(tmp_path / "results"))


@pytest.fixture
def mock_host_info():
    """Host snapshot as returned by utils.helpers.get_host_info."""
    return {
        "cpu_count": 8,
        "cpu_count_logical": 16,
        "memory_total_human": "16.0 GB",
        "memory_available_human": "8.0 GB",
        "memory_percent": 50.0,
        "process_rss_human": "100.0 MB",
    }


@pytest.fixture
def mock_virtual_memory():
    """Mock psutil.virtual_memory() result."""
    return MagicMock(total=16 * 1024**3, available=8 * 1024**3, percent=50.0)


# ========== Pytest Hooks ==========

def pytest_configure(config):
    """Configure pytest with custom settings."""
    config.addinivalue_line(
        "markers", "unit: Unit tests for individual functions"
    )
    config.addinivalue_line(
        "markers", "integration: Integration tests for component interactions"
    )
    config.addinivalue_line(
        "markers", "slow: Directional benchmark runs"
    )


def pytest_collection_modifyitems(config, items):
    """Modify test collection to add markers automatically."""
    for item in items:
        # Auto-mark tests based on path
        if "unit" in str(item.fspath):
            item.add_marker(pytest.mark.unit)
        elif "integration" in str(item.fspath):
            item.add_marker(pytest.mark.integration)
