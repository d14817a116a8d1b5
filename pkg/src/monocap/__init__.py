"""Capacities, exterior potentials, monotone quantities and cone rigidity on graphs and radial models."""

__version__ = "0.1.0"
