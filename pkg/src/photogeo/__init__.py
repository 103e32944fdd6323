"""Photometric + geometric place realignment with sequential on-manifold fusion."""

__version__ = "0.1.0"
