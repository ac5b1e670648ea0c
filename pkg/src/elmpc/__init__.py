"""Entanglement-metric monitoring and adaptation for a point-mass MPC."""

__version__ = "0.1.0"
