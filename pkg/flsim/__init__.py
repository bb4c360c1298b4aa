"""Wireless federated learning simulator with layer-wise adaptive modulation."""

__version__ = "0.1.0"
