"""Newton solvers with a learned fixed-point neural right-preconditioner."""

__version__ = "0.1.0"
