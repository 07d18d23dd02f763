"""Exception types shared across the pipeline.

The CLI maps these onto process exit codes: usage errors exit 1, data
errors exit 2, numeric failures exit 3.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class UsageError(ValueError):
    """Bad command-line arguments or configuration keys."""


class DataError(ValueError):
    """Malformed or missing on-disk data."""


class NumericFailure(RuntimeError):
    """NaN loss, failed gradient check, or similar numeric breakdown."""
