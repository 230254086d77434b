"""Region-proposal training with attention-based false-negative detection
and soft-label losses for datasets with missing annotations."""

__version__ = "0.1.0"
