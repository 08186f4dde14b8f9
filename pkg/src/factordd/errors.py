"""Exception and warning types shared across the package."""


class UsageError(ValueError):
    """Caller violated an argument contract (bad shape, range, or flag)."""


class DataLoadError(RuntimeError):
    """A dataset file is missing, truncated, or corrupt."""


class FormatError(RuntimeError):
    """A checkpoint file does not conform to the on-disk format."""


class NumericsError(ArithmeticError):
    """A computation hit a degenerate numerical domain (zero norm, divergence)."""


class DegenerateGridWarning(UserWarning):
    """A loss was evaluated on a grid too small to contribute (e.g. one hallucinator)."""
