"""Exception types shared across the package."""


class DataFormatError(ValueError):
    """Malformed, duplicate or out-of-range input data."""


class DivergenceError(RuntimeError):
    """An iterative fit blew up (objective increasing or non-finite values)."""
