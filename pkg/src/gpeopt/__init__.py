"""Riemannian solvers for coupled Gross-Pitaevskii ground states on quadratic FE meshes."""

__version__ = "0.1.0"
