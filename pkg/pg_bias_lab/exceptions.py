# ABOUTME: This file defines custom exceptions for the pg_bias_lab package.
# ABOUTME: These exceptions let the harness and CLI report numerical and config failures precisely.

class LabException(Exception):
    """Base class for exceptions raised by pg_bias_lab."""
    pass

class InvalidMdpError(LabException):
    """Raised when an MDP violates a structural invariant (row sums, terminal state, p0)."""
    def __init__(self, message="Invalid MDP definition"):
        super().__init__(message)

class NonEpisodicError(LabException):
    """Raised when an MDP does not terminate with probability 1 under the policy in use."""
    def __init__(self, message="MDP is not episodic under the given policy"):
        super().__init__(message)

class DomainError(LabException):
    """Raised when an argument lies outside its mathematical domain."""
    def __init__(self, name: str, value, expected: str):
        self.name = name
        self.value = value
        message = f"{name}={value!r} is outside its domain ({expected})"
        super().__init__(message)

class DimensionMismatchError(LabException):
    """Raised when a state or action does not match the policy's shapes."""
    def __init__(self, message="State or action has the wrong dimension"):
        super().__init__(message)

class UnsupportedPolicyKindError(LabException):
    """Raised when an operation is asked of a policy kind that cannot provide it."""
    def __init__(self, kind: str, operation: str):
        self.kind = kind
        message = f"Operation '{operation}' is not supported for policy kind '{kind}'"
        super().__init__(message)

class NonFiniteError(LabException):
    """Raised when a NaN or infinity shows up in a computation."""
    def __init__(self, message="Non-finite value encountered", layer: int | None = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)

class EmptyDatasetError(LabException):
    """Raised when an estimator or diagnostic receives no data."""
    def __init__(self, message="Dataset is empty"):
        super().__init__(message)

class UndefinedRatioError(LabException):
    """Raised when a density ratio has a zero denominator where the probe has mass."""
    def __init__(self, message="Density ratio is undefined"):
        super().__init__(message)

class DegenerateInputError(LabException):
    """Raised when input has no variation to analyse (e.g. all rows identical)."""
    def __init__(self, message="Input is degenerate"):
        super().__init__(message)

class UndefinedCorrelationError(LabException):
    """Raised when a correlation is requested for a zero-variance argument."""
    def __init__(self, message="Correlation is undefined for zero-variance input"):
        super().__init__(message)

class DivergenceError(LabException):
    """Raised when training produces non-finite parameters or an exploding loss."""
    def __init__(self, message="Training diverged"):
        super().__init__(message)

class ConfigError(LabException):
    """Raised when an experiment configuration is invalid or cannot be parsed."""
    def __init__(self, message="Invalid experiment configuration"):
        super().__init__(message)

class SchemaError(LabException):
    """Raised when an output row does not match its declared CSV header."""
    def __init__(self, message="CSV row does not match the header schema"):
        super().__init__(message)

class ExperimentFailedError(LabException):
    """Raised when every job of an experiment failed, so there is no result to report."""
    def __init__(self, message="Every job of the experiment failed"):
        super().__init__(message)
