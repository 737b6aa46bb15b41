"""Exception types raised across the package.

Every error derives from :class:`FrameLensError` so callers (and the CLI) can
catch the whole family at once. Where a built-in category fits, the error also
subclasses it (``ValueError``, ``RuntimeError``).
"""

from __future__ import annotations


class FrameLensError(Exception):
    """Base class for all package errors."""


# rollout / attention stacks
class StackShapeError(FrameLensError, ValueError):
    pass


class StackValueError(FrameLensError, ValueError):
    """Attention rows are not stochastic or masked entries are nonzero."""


class DegenerateRowError(FrameLensError, ArithmeticError):
    def __init__(self, message: str, layer: int | None = None, row: int | None = None):
        super().__init__(message)
        self.layer = layer
        self.row = row


# metrics
class EmptyQueryError(FrameLensError, ValueError):
    pass


class GeometryError(FrameLensError, ValueError):
    pass


class ZeroVisualMassError(FrameLensError, ArithmeticError):
    pass


class InsufficientSampleError(FrameLensError, ValueError):
    pass


class DegenerateQuartileError(FrameLensError, ArithmeticError):
    pass


class GroupingError(FrameLensError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


# reframing / items
class TemplateError(FrameLensError, ValueError):
    pass


class ReframeParseError(FrameLensError, ValueError):
    pass


class FramingError(FrameLensError, ValueError):
    pass


class EndpointError(FrameLensError, RuntimeError):
    pass


# evaluation
class CapabilityError(FrameLensError, TypeError):
    pass


class EmptyDenominatorError(FrameLensError, ZeroDivisionError):
    pass


# tuner
class AlignmentShapeError(FrameLensError, ValueError):
    pass


class EmptyGoldError(FrameLensError, ValueError):
    pass


class NumericalError(FrameLensError, ArithmeticError):
    pass


class ScheduleError(FrameLensError, ValueError):
    pass


class TrainingAbortedError(FrameLensError, RuntimeError):
    pass


# harness
class DumpFormatError(FrameLensError, ValueError):
    pass


class ConfigError(FrameLensError, ValueError):
    pass
