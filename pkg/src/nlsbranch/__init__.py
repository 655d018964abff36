"""Continuation and bifurcation of ground states of the stationary NLS with a potential."""
__version__ = "0.1.0"
