"""Global charts for solution manifolds of differential equations with
discrete state-dependent delays, on a Chebyshev-discretized history space."""

__version__ = "0.1.0"
