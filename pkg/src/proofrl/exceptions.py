"""Exception hierarchy.

Validation-style errors (bad shapes, bad parameters, stage ordering) map to
CLI exit code 2; anything else escaping a command is a runtime fault (3).
"""


class ProofreadError(Exception):
    """Base class for all errors raised by proofrl."""


class DimensionError(ProofreadError, ValueError):
    pass


class BoundsError(ProofreadError, IndexError):
    pass


class ActionError(ProofreadError, ValueError):
    pass


class ParameterError(ProofreadError, ValueError):
    pass


class LabelError(ProofreadError, ValueError):
    pass


class AdjacencyError(ProofreadError, ValueError):
    pass


class UndefinedMetricError(ProofreadError, ValueError):
    pass


class InjectionError(ProofreadError, ValueError):
    pass


class StageError(ProofreadError, RuntimeError):
    """Raised when an agent is trained before the agents it delegates to."""


class FormatError(ProofreadError, ValueError):
    pass


class NoOpEdit(ProofreadError):
    """An edit request that leaves the label map untouched (background target,
    single-pixel segment, merging a segment with itself)."""


class TrainingFault(ProofreadError, RuntimeError):
    """Non-finite loss or parameters during training."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


VALIDATION_ERRORS = (
    DimensionError,
    BoundsError,
    ActionError,
    ParameterError,
    LabelError,
    AdjacencyError,
    UndefinedMetricError,
    InjectionError,
    StageError,
    FormatError,
)
