"""Self-adaptive masked contrastive pre-training for a small vision state-space encoder."""

__version__ = "0.1.0"
