"""Federated learning with a single shared image as the distillation proxy."""

__version__ = "0.1.0"
