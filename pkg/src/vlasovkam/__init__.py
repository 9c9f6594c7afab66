"""Lagrangian Vlasov dynamics on the circle: weak-KAM solvers, minimal orbits and diffusion experiments."""

__version__ = "0.1.0"
