"""Exception types shared across the toolkit.

The CLI maps these onto stable exit codes: ValueError family -> 1,
OSError -> 2, numerical/training failures -> 3.
"""


class ValidationError(ValueError):
    """Input data violates a documented invariant (labels, shapes, duplicates)."""


class DataFormatError(ValueError):
    """A file does not conform to its declared format (bad magic, ragged row, truncation)."""


class MetricUndefinedError(ValueError):
    """No class in the batch admits the requested metric (e.g. AUC with one label)."""


class TrainingError(RuntimeError):
    """Optimization produced a non-finite loss or gradient."""


class NumericalError(RuntimeError):
    """A numerical routine left its domain of validity (singular matrix, NaN iterate)."""
