"""Page-wise recommendation with actor-critic reinforcement learning."""

__version__ = "0.1.0"
