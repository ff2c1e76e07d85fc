"""Exception types shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, DataError exits 2,
NumericError exits 3.
"""


class DataError(Exception):
    """Invalid or inconsistent input data (bad shapes, corrupt files, ...)."""


class NumericError(Exception):
    """Numerical failure, e.g. a non-finite training loss."""
