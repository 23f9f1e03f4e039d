"""Adversarially trained model compression with ADMM."""

__version__ = "0.1.0"
