"""Clifford geometric propagation and adaptive holographic aggregation for multimodal-attributed graphs."""

__version__ = "0.1.0"
