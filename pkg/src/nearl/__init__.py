"""Hierarchical state-to-state reinforcement learning with a gated inverse dynamics model."""

__version__ = "0.1.0"
