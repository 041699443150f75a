"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Input tensor dimensions violate an operation's contract."""


class ConfigError(ValueError):
    """A configuration object is internally inconsistent or incomplete."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input (e.g. a zero-norm vector on the hypersphere)."""


class EmptyTailError(ValueError):
    """Requested a teacher tail starting past the last stage."""


class DivergenceError(RuntimeError):
    """Training produced non-finite loss values."""
