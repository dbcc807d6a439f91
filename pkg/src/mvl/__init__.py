"""Minimum-velocity learning for energy-based models."""
