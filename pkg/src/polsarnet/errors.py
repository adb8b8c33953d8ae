"""Shared exception types, mapped onto CLI exit codes.

UsageError -> exit 1, DataError -> exit 2. Numerical trouble reuses
tensor.NumericalError -> exit 3.
"""


class UsageError(Exception):
    """Bad flags, bad config, or a config that contradicts itself."""


class DataError(Exception):
    """Malformed or inconsistent input data."""
