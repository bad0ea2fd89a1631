"""Learned control-flow integrity checking over gadget-level CFGs."""

__all__ = ["__version__"]

__version__ = "1.0.0"
