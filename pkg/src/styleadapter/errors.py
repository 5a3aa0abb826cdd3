class ConfigError(ValueError):
    """Model or run configuration is inconsistent."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class IntegrityError(RuntimeError):
    """A stored archive failed its version or hash check."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during training or sampling."""
