"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration. ``field`` names the offending field path when known."""

    def __init__(self, message, field=None):
        if field is not None:
            message = f"{field}: {message}"
        super().__init__(message)
        self.field = field


class ShapeError(ValueError):
    """Tensor shapes are incompatible. ``dim`` names the offending dimension."""

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class UsageError(RuntimeError):
    """API misuse, e.g. differentiating a value that was never recorded."""


class AuditError(RuntimeError):
    """Closed-form and constructed parameter counts disagree for ``layer``."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss at ``step``."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss
