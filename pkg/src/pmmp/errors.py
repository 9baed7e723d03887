"""Exception types shared across the package."""


class PmmpError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(PmmpError):
    """Input data violates the declared schema (bad label, missing column, ...)."""


class ConfigError(PmmpError):
    """An operation was configured inconsistently (duplicate terms, bad grid, ...)."""


class GroupKeyError(PmmpError, KeyError):
    """A prediction key has the wrong arity or an out-of-range category."""

    def __str__(self) -> str:  # KeyError repr()s its argument; keep plain text
        return self.args[0] if self.args else ""


class RankDeficiencyError(PmmpError):
    """The weighted normal equations are numerically singular."""


class InternalError(PmmpError):
    """An internal invariant was violated; indicates a bug, not bad input."""


class AssumptionWarning(UserWarning):
    """Fitted data is in a regime where the asymptotic guarantees are weak."""
