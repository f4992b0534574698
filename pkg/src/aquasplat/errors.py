"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An API precondition was broken: shape mismatch, stale cache, bad units."""


class ConfigError(ValueError):
    """User-facing configuration problem: unknown recipe, empty input, bad size."""


class NumericalFailure(RuntimeError):
    """Optimization produced a non-finite loss; carries a diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
