"""Exception types shared across the package."""
from __future__ import annotations


class ProtolabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ProtolabError):
    """Invalid or inconsistent configuration (dimensions, paths, fields)."""


class DataError(ProtolabError):
    """Dataset construction or ingestion failure."""


class DomainError(ProtolabError):
    """Input outside an operation's mathematical domain (e.g. zero-norm vector)."""


class MatchInfeasibleError(ProtolabError):
    """Fewer encoder patches than prototype tokens to assign."""


class ProjectionError(ProtolabError):
    """Prototype projection could not find candidates (e.g. empty class)."""


class NumericalError(ProtolabError):
    """Non-finite value where a finite one is required; carries the parameter name."""


class DivergenceError(ProtolabError):
    """Training produced a non-finite loss; message carries stage/epoch context."""


class InvariantViolation(ProtolabError):
    """A documented model invariant was broken (e.g. negative scoring weight)."""
