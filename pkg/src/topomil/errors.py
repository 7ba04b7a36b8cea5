"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: validation/config problems
exit 2, data format problems exit 3, numeric failures exit 4.
"""


class ValidationError(ValueError):
    """Bad arguments, bad configuration, violated preconditions."""


class DimensionError(ValidationError):
    """Shape mismatch between operands; message names both shapes."""


class FormatError(RuntimeError):
    """Malformed on-disk data: bag files, manifests, checkpoints."""


class NumericError(ArithmeticError):
    """Non-finite values or other numeric breakdown during computation."""


class TapeStateError(RuntimeError):
    """A differentiation record was used after it was consumed."""


class UndefinedMetricError(ValidationError):
    """A metric has no defined value on the given inputs (degenerate data)."""
