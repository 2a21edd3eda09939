"""Shared exception types."""


class StructuralError(ValueError):
    """Misuse of an interface: bad shapes, missing fields, unknown ids."""


class NumericError(ArithmeticError):
    """A computation left its numeric domain (overflow, non-finite values)."""


class DegenerateLatticeError(NumericError):
    """Every feasible lattice cell underflowed to zero at some timestep."""


class GenerationError(RuntimeError):
    """Demonstration generation could not complete (e.g. step cap exceeded)."""


class DataError(ValueError):
    """A persisted file is missing, malformed, or inconsistent."""
