"""Adaptive racing MPC driven by a bank of sampled tire models."""

__version__ = "0.1.0"
