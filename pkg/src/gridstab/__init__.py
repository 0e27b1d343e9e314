"""Dynamic stability estimation and surrogate models for synthetic power grids."""

from .server import main

__all__ = ["main"]
