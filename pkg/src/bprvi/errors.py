class DomainError(ValueError):
    """Input outside the domain of an operation."""


class NumericalError(RuntimeError):
    """Non-finite values encountered where the computation cannot recover."""


class ConfigError(ValueError):
    """Invalid or unknown configuration field."""
