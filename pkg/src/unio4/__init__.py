"""Offline-to-online reinforcement learning with ensemble behavior cloning and AM-Q gated offline PPO."""

__version__ = "0.1.0"
