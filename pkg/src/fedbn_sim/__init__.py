"""Federated learning with local batch normalization: simulator and NTK checks."""

__version__ = "0.1.0"
