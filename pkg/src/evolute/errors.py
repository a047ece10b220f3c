"""Exception hierarchy shared across the package.

Every error carries the process exit code the CLI maps it to:
2 usage/config, 3 data, 4 numeric or simulation failure.
"""

from __future__ import annotations


class EvoluteError(Exception):
    exit_code = 1


class ConfigError(EvoluteError):
    """Invalid configuration value; message names the offending field."""

    exit_code = 2


class DataError(EvoluteError):
    """Unreadable, malformed, or empty dataset/bundle files."""

    exit_code = 3


class TrainingError(EvoluteError):
    """Non-finite losses or gradients; training aborts fast."""

    exit_code = 4


class SimulationError(EvoluteError):
    """Invalid state transition, e.g. stepping a finished episode."""

    exit_code = 4


class MetricError(EvoluteError):
    """Undefined metric, e.g. correlation of a zero-variance grid."""

    exit_code = 4


class ProtocolError(EvoluteError):
    """Session wire-protocol violation."""

    exit_code = 3
