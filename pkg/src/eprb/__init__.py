"""Certified reduced-basis approximation and trust-region parameter
estimation for a coupled elliptic-parabolic 1d system."""

__version__ = "0.1.0"

from .problem import ProblemDefinition, TimeGrid
from .fe import AssembledOperators, FeSpace, assemble, boundary_vector, build_space, project_initial

__all__ = [
    "ProblemDefinition",
    "TimeGrid",
    "AssembledOperators",
    "FeSpace",
    "assemble",
    "boundary_vector",
    "build_space",
    "project_initial",
]
