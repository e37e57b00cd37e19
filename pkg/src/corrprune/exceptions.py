"""Exception and warning types shared across the package."""


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during evaluation.

    ``node`` holds the first offending tape node when one could be identified.
    """

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class UnderConstrainedError(ValueError):
    """Fewer than eight positively weighted correspondences."""


class CheiralityError(RuntimeError):
    """No pose candidate places any point in front of both cameras."""


class EstimationFailure(RuntimeError):
    """A robust estimator could not produce a model."""


class FrustumError(RuntimeError):
    """Scene generation could not place a point in front of both cameras."""


class MatchFileError(ValueError):
    """A match file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(ValueError):
    """Invalid run configuration (unknown key, bad value)."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class CheckpointVersionError(ValueError):
    """Checkpoint header does not match the supported format version."""


class TrainingDiverged(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, batch_seed=None):
        super().__init__(message)
        self.batch_seed = batch_seed


class DegenerateGeometryWarning(RuntimeWarning):
    """Eigenvalue gap too small for a stable eigenvector derivative."""
