"""Mixture factorized auto-encoder: unsupervised factorization of speech into
frame-level mixture labels and a sequence-level embedding."""

__version__ = "0.1.0"
