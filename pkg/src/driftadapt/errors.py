"""Exception types shared across the package."""


class ConfigError(ValueError):
    """A configuration value is out of range or structurally invalid."""


class UnsupportedModelError(TypeError):
    """The requested operation is not defined for this model type."""


class ParseError(ValueError):
    """A data file does not match its documented schema."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TrainingError(RuntimeError):
    """Offline training diverged or otherwise failed."""


class NumericsError(ArithmeticError):
    """A linear solve failed or non-finite values appeared in filter state.

    Carries enough context to diagnose ill-conditioned covariance updates.
    """

    def __init__(self, message, *, lam=None, sigma_r=None, condition=None):
        parts = [message]
        if lam is not None:
            parts.append(f"lambda={lam!r}")
        if sigma_r is not None:
            parts.append(f"sigma_r={sigma_r!r}")
        if condition is not None:
            parts.append(f"cond={condition:.3e}")
        super().__init__("; ".join(parts))
        self.lam = lam
        self.sigma_r = sigma_r
        self.condition = condition
