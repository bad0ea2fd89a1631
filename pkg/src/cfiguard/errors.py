from __future__ import annotations


class CfiGuardError(Exception):
    """Base class for every error raised by the pipeline."""

    exit_code = 1


class ConfigError(CfiGuardError, ValueError):
    """Raised for invalid configuration values or command usage."""

    exit_code = 1


class DataError(CfiGuardError):
    """Raised when an input artifact is malformed or inconsistent."""

    exit_code = 2


class UnknownGadgetId(DataError, KeyError):
    def __init__(self, gadget_id: int):
        super().__init__(f"Unknown gadget id: {gadget_id}")
        self.gadget_id = gadget_id

    def __str__(self) -> str:
        return self.args[0]


class ComponentMismatch(DataError):
    """Raised when artifacts that must share provenance were built from different inputs."""
