"""Convex integration of isometric immersions of flat tori.

Grid-level implementation of the Nash-Kuiper stage iteration for maps of
the flat ``n``-torus into ``R^(2n)``: primitive metric decompositions,
Nash spirals with integration-by-parts correctors, Kuiper corrugations,
an exponent auditor and a command line driver.
"""

from .errors import CForgeError

__version__ = "0.1.0"

__all__ = ["CForgeError", "__version__"]
