"""ExpMul attention exceptions."""


class ExpMulError(Exception):
    """Base exception for expmul-attention errors."""
    pass


class DomainError(ExpMulError, ValueError):
    """Raised for NaN/infinite inputs or empty key sequences."""
    pass


class ContractError(ExpMulError, ValueError):
    """Raised when an operation's precondition does not hold."""
    pass


class ShapeError(ExpMulError, ValueError):
    """Raised when vector lengths or tensor shapes do not agree."""
    pass


class ConfigError(ExpMulError):
    """Raised for invalid run or sweep configuration."""
    pass


class TensorFileError(ExpMulError):
    """Raised when a tensor file cannot be decoded."""

    def __init__(self, path, message: str):
        self.path = str(path)
        super().__init__(f"{self.path}: {message}")
