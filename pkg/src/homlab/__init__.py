"""Simulation and analysis of Hong-Ou-Mandel interference between autonomous CW photon-pair sources."""

__version__ = "0.1.0"
