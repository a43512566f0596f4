"""Exception taxonomy shared across the package.

Validation failures (bad inputs, bad configs, incompatible files) map to CLI
exit code 1; runtime/numerical failures map to exit code 2.
"""


class SmileError(Exception):
    """Base class for all package errors."""


class ValidationError(SmileError):
    """Caller supplied something malformed (exit code 1)."""


class InvalidInputError(ValidationError):
    """Operation precondition violated (shape/dim/range mismatch)."""


class ConfigError(ValidationError):
    """Config file or config object failed validation."""


class CheckpointVersionError(ValidationError):
    """Checkpoint file has an unsupported format version."""


class RuntimeFailure(SmileError):
    """Something went wrong while running (exit code 2)."""


class TrainingError(RuntimeFailure):
    """Non-finite loss/gradient or other optimization failure."""


class EnvironmentFault(RuntimeFailure):
    """Simulation produced a non-finite state."""
