"""Exception types shared across the package."""


class ParameterError(ValueError):
    """Invalid or inconsistent parameters."""


class UnsupportedError(ParameterError):
    """Requested configuration is outside the supported range."""


class NumericError(ArithmeticError):
    """A numeric computation failed (non-finite values, degenerate measures)."""

    def __init__(self, message, stage=None):
        if stage is not None:
            message = f"[{stage}] {message}"
        super().__init__(message)
        self.stage = stage


class SingularMatrixError(NumericError):
    """A matrix required to be invertible was singular."""
