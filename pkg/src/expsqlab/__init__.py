"""Lattice simulator for the elliptic stochastic quantization of the exponential field."""

__version__ = "0.1.0"
