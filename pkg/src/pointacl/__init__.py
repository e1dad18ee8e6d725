"""Attention-driven dynamic masking and dual-branch contrastive pretraining for point clouds."""

__version__ = "0.1.0"
