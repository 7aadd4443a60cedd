"""
Helper utilities for the simulator: host diagnostics and number formatting.
"""

import logging
from typing import Dict

import psutil

logger = logging.getLogger(__name__)


def bytes_to_human_readable(bytes_value: int) -> str:
    """
    Convert bytes to human-readable format.

    Args:
        bytes_value: Number of bytes

    Returns:
        Human-readable string (e.g., "1.5 GB")
    """
    for unit in ['B', 'KB', 'MB', 'GB', 'TB']:
        if bytes_value < 1024.0:
            return f"{bytes_value:.1f} {unit}"
        bytes_value /= 1024.0
    return f"{bytes_value:.1f} PB"


def get_host_info() -> Dict[str, any]:
    """
    Snapshot of the host the run executes on.

    Attached to divergence diagnostics and logged at run start; never
    written to result files, which must stay byte-stable.

    Returns:
        Dict with memory and CPU information
    """
    mem = psutil.virtual_memory()
    process_rss = psutil.Process().memory_info().rss
    return {
        'cpu_count': psutil.cpu_count(),
        'cpu_count_logical': psutil.cpu_count(logical=True),
        'memory_total_human': bytes_to_human_readable(mem.total),
        'memory_available_human': bytes_to_human_readable(mem.available),
        'memory_percent': mem.percent,
        'process_rss_human': bytes_to_human_readable(process_rss),
    }


def default_worker_count(num_clients: int) -> int:
    """
    Worker-pool size used when the config does not set one.

    Args:
        num_clients: Number of simulated clients

    Returns:
        min(num_clients, logical CPU count), at least 1
    """
    cpus = psutil.cpu_count(logical=True) or 1
    return max(1, min(num_clients, cpus))


def format_float(value: float) -> str:
    """Serialize a float with 17 significant digits."""
    return format(float(value), '.17g')


def format_percentage(value: float, decimals: int = 2) -> str:
    """
    Format a fraction in [0, 1] as a percentage.

    Args:
        value: Fraction value
        decimals: Number of decimal places

    Returns:
        Formatted string (e.g., "26.59%")
    """
    return f"{value * 100:.{decimals}f}%"
