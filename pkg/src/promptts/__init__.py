"""Instruction-conditioned in-context time-series model at desk scale."""

__version__ = "0.1.0"
