"""
Exception hierarchy for the lifelong sequence-generation lab.

Every error kind also derives from the closest builtin, so callers may catch
either the lab-specific class or the builtin (e.g. ``ValueError``).
"""

from typing import Optional


class DMEAError(Exception):
    """Base class for all lab errors."""


class InvalidInputError(DMEAError, ValueError):
    """An argument violates an operation's precondition."""


class InvalidSampleError(DMEAError, ValueError):
    """An encoded sample cannot be used by a loss or the encoder."""


class RoutingError(DMEAError, LookupError):
    """A routing references a module that does not exist."""


class InvalidStateError(DMEAError, RuntimeError):
    """Pool, basis store or model state is inconsistent with the request."""


class NumericalFailureError(DMEAError, ArithmeticError):
    """A loss, gradient or coefficient became non-finite."""


class OracleFailureError(NumericalFailureError):
    """The finite-difference oracle evaluated a non-finite function value."""


class TrainingFailureError(DMEAError, RuntimeError):
    """Backbone pretraining diverged."""


class CheckpointError(DMEAError, OSError):
    """A checkpoint file is malformed or written by an incompatible version."""


class StageFailureError(DMEAError, RuntimeError):
    """A lifelong-learning stage failed for a specific task."""

    def __init__(self, message: str, task_id: Optional[str] = None, stage: Optional[str] = None):
        self.task_id = task_id
        self.stage = stage
        prefix = ""
        if stage or task_id:
            prefix = f"[{stage or '?'}:{task_id or '?'}] "
        super().__init__(prefix + message)
