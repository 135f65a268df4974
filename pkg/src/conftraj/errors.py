"""Exception hierarchy shared across the package."""


class ConftrajError(Exception):
    """Base class for all package errors."""


class SchemaError(ConftrajError):
    """CSV schema does not match the declared column roles."""


class DataError(ConftrajError):
    """Input data violates an invariant (duplicates, missing labels, ...)."""


class ConfigurationError(ConftrajError):
    """A configuration value is out of its admissible range."""


class NumericalError(ConftrajError):
    """A numerical routine failed beyond recoverable tolerances."""
