"""Federated learning simulator with layer-wise local differential privacy budgets."""

__version__ = "0.1.0"
