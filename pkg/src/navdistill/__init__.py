"""Desk-scale two-stage knowledge distillation for a dual-scale graph navigator."""

__version__ = "0.1.0"
