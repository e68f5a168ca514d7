"""Sparse residual memory for lifelong editing of a small transformer."""

__version__ = "0.1.0"
