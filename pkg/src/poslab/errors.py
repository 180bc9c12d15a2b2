"""Exception types that CLI exit codes and control flow depend on."""
from __future__ import annotations


class ConfigError(ValueError):
    """Bad experiment configuration (file, key, or value)."""


class DegenerateRecordError(RuntimeError):
    """Teacher produced an unusable advantaged response (empty/immediate stop)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the history up to the failure."""

    def __init__(self, message: str, history: dict | None = None):
        super().__init__(message)
        self.history = history or {}


class InductionFailure(RuntimeError):
    """Bias induction missed its accuracy target within the step budget."""

    def __init__(self, message: str, history: dict | None = None):
        super().__init__(message)
        self.history = history or {}
