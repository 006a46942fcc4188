"""Exception types shared across the package."""


class InputError(ValueError):
    """Invalid user-supplied input (bad index, malformed file, inconsistent ids)."""


class DataError(InputError):
    """A data file parsed but its contents are unusable (gaps, duplicates, unknown units)."""


class NoOpMove(ValueError):
    """A move that would leave the partition unchanged (e.g. island on a singleton)."""


class NumericalError(ArithmeticError):
    """A factorization failed. Carries the offending cluster when known."""

    def __init__(self, message, cluster=None):
        super().__init__(message)
        self.cluster = cluster


class CacheConsistencyError(RuntimeError):
    """A cached likelihood state was used against a particle it was not built for."""


class DegenerateInputError(InputError):
    """Heuristic inputs without spread (zero variance, constant estimates)."""
