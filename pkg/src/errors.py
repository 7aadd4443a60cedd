"""
Exception hierarchy for the simulator.

Every failure raised by the simulator derives from SimulationError so the
CLI can map it to an exit status in one place.
"""

from typing import Any, Dict, Optional


class SimulationError(Exception):
    """Base class for all simulator errors."""


class ConfigurationError(SimulationError):
    """Invalid configuration, shape mismatch or unpaired metric series."""


class UsageError(ConfigurationError):
    """Bad user input: unknown key or out-of-range value."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class InvalidMaskError(SimulationError):
    """Empty category mask or category id outside [0, C_max)."""


class ContractViolationError(SimulationError):
    """A caller broke an operation's precondition."""


class TrainingDivergedError(SimulationError):
    """Non-finite gradients or parameters during local training."""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class BufferCorruptionError(SimulationError):
    """A buffered sample carries a label outside the historical categories."""


class UndefinedMetricError(SimulationError):
    """A metric was requested over an empty set."""


class RunAbortedError(SimulationError):
    """A client step failed; carries per-client diagnostics."""

    def __init__(self, message: str, diagnostics: Optional[Dict[int, Dict[str, Any]]] = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class OutputError(SimulationError):
    """Writing results failed."""

    def __init__(self, path, cause: Exception):
        super().__init__(f"could not write {path}: {cause}")
        self.path = path
