"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, EstimationError -> 3.  Messages name the module that
raised them so batch logs are actionable.
"""


class ConfigError(ValueError):
    """Invalid arguments or configuration."""


class DataError(ValueError):
    """Input data violates a contract."""


class SchemaError(DataError):
    """A required column is missing from the input."""


class ParseError(DataError):
    """A cell could not be parsed as a number."""


class ValidationError(DataError):
    """Parsed data violates a table invariant (NaN, inf, length mismatch)."""


class EstimationError(RuntimeError):
    """Numeric or degeneracy failure during estimation."""


class DegenerateTreatmentError(EstimationError):
    """Residualized treatment carries no variation."""


class DegenerateColumnError(EstimationError):
    """A column selected for standardization has zero variance."""


class PartitionError(EstimationError):
    """A bin partition could not be constructed."""


class SparseCellError(EstimationError):
    """A (fold, bin) training cell has no rows."""


class ClassSupportError(EstimationError):
    """A class label has no training support."""


class RankError(EstimationError):
    """Design matrix of residualized indicators is rank deficient."""


class GapError(EstimationError):
    """Integer treatment support has gaps where consecutiveness is required."""


class NumericError(EstimationError):
    """A numeric routine failed to converge or hit an invalid value."""
