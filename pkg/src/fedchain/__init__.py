"""Fully coupled blockchain-based federated learning, simulated at desk scale."""

__version__ = "0.1.0"
