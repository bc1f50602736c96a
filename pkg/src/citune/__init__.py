"""Continual instruction tuning engine and benchmark harness at desk scale."""

__version__ = "0.1.0"
