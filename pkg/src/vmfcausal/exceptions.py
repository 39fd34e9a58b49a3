"""Exception types raised across the package."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class SaturationError(ValueError):
    """Mean resultant length too close to one to estimate a concentration."""


class DegenerateProjectionError(ArithmeticError):
    """Pre-normalization vector has (near) zero norm."""


class DegenerateAggregationError(ArithmeticError):
    """Aggregated message vector has zero norm and cannot be renormalized."""


class ConfigError(ValueError):
    """Invalid run configuration (unknown keys, bad values)."""


class TrainingDivergedError(FloatingPointError):
    """Loss or parameters became non-finite during optimization."""
