"""Stabilised continuous Galerkin finite elements for scalar transport.

Continuous interior penalty and residual-switched artificial diffusion on
structured triangle meshes, SSP-RK3 time stepping, and the weighted norms
used to measure how far the effect of a shock spreads.
"""

__version__ = "0.1.0"
