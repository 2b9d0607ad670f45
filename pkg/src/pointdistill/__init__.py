"""Filtered self-distillation for point tracking on synthetic two-domain video."""

__version__ = "0.1.0"
