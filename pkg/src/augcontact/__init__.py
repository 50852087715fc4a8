"""Barrier-augmented Lagrangian contact simulation for tetrahedral meshes."""

__version__ = "0.1.0"
