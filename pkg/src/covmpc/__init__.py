"""Receding-horizon coverage control with tracking MPC."""

__version__ = "0.1.0"
