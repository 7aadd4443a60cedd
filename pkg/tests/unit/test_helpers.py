"""
Unit Tests for utils/helpers.py
"""

import pytest
from unittest.mock import MagicMock, patch

from utils.helpers import (
    bytes_to_human_readable,
    default_worker_count,
    format_float,
    format_percentage,
    get_host_info,
)


# ========== Test bytes_to_human_readable ==========

class TestBytesToHumanReadable:
    """Test suite for bytes_to_human_readable function."""

    def test_bytes(self):
        assert bytes_to_human_readable(0) == "0.0 B"
        assert bytes_to_human_readable(1023) == "1023.0 B"

    def test_units(self):
        assert bytes_to_human_readable(1536) == "1.5 KB"
        assert bytes_to_human_readable(1024 * 1024 * 100) == "100.0 MB"
        assert bytes_to_human_readable(1024 ** 3 * 16) == "16.0 GB"
        assert bytes_to_human_readable(1024 ** 4 * 5) == "5.0 TB"
        assert bytes_to_human_readable(1024 ** 5 * 10) == "10.0 PB"


# ========== Test get_host_info ==========

class TestGetHostInfo:
    """Test suite for get_host_info function."""

    @patch('utils.helpers.psutil.Process')
    @patch('utils.helpers.psutil.cpu_count')
    @patch('utils.helpers.psutil.virtual_memory')
    def test_snapshot(self, mock_vm, mock_cpu_count, mock_process, mock_virtual_memory,
                      mock_host_info):
        mock_vm.return_value = mock_virtual_memory
        mock_cpu_count.side_effect = lambda logical=False: 16 if logical else 8
        mock_process.return_value.memory_info.return_value = MagicMock(rss=100 * 1024 ** 2)

        assert get_host_info() == mock_host_info


# ========== Test default_worker_count ==========

class TestDefaultWorkerCount:
    """Test suite for default_worker_count function."""

    @pytest.mark.parametrize("clients,cpus,expected", [
        (5, 16, 5),
        (50, 8, 8),
        (3, None, 1),
        (0, 4, 1),
    ])
    def test_bounds(self, clients, cpus, expected):
        with patch('utils.helpers.psutil.cpu_count', return_value=cpus):
            assert default_worker_count(clients) == expected


# ========== Test formatting ==========

class TestFormatting:
    """Test suite for format_float and format_percentage."""

    def test_float_round_trips_exactly(self):
        for value in (1 / 3, 0.1, 2.0 ** -40, 123456.789):
            assert float(format_float(value)) == value

    def test_float_short_values(self):
        assert format_float(0.5) == "0.5"
        assert format_float(1.0) == "1"

    def test_percentage(self):
        assert format_percentage(0.2659) == "26.59%"
        assert format_percentage(1.0, decimals=0) == "100%"
