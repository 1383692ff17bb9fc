class NodeGamError(Exception):
    """Base exception for all NODE-GAM errors."""

    exit_code: int = 1

    def __init__(self, message: str, context: dict = None):
        """
        Initialize the exception with a message and context.

        Args:
            message: Error message
            context: Additional context information for debugging
        """
        super().__init__(message)
        self.message = message
        self.context = context or {}

    def __str__(self):
        if self.context:
            context_str = ", ".join([f"{k}={v}" for k, v in self.context.items()])
            return f"{self.message} (Context: {context_str})"
        return self.message


class InvalidArgumentError(NodeGamError):
    """Raised when an operation receives an argument outside its domain."""
    pass


class InvalidStateError(NodeGamError):
    """Raised when an operation is called on an object in the wrong state (e.g. an unannealed model)."""
    pass


class ConfigError(NodeGamError):
    """Raised when a run configuration is invalid (unknown keys, bad values)."""
    pass


class SchemaError(NodeGamError):
    """Raised when tabular data does not match the declared schema."""
    exit_code = 2


class DataError(NodeGamError):
    """Raised when input data is missing, empty or unreadable."""
    exit_code = 2


class ArtifactError(NodeGamError):
    """Raised when a model container is corrupt or has an unsupported version."""
    exit_code = 2


class NumericalError(NodeGamError):
    """Raised when training or extraction hits non-finite values."""
    exit_code = 3


class NonAdditivityError(NumericalError):
    """Raised when a predictor handed to shape extraction is not additive."""
    pass
