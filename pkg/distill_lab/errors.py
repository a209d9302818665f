"""
Exception hierarchy for distill-lab.

Every error raised on purpose by the library derives from DistillLabError so
callers (the CLI and the experiment runner) can tell domain failures apart
from programming errors.
"""

from typing import Iterable, Optional


class DistillLabError(Exception):
    """Base class for all distill-lab errors."""


class ShapeError(DistillLabError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, message: str, *shapes: tuple):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)
        self.shapes = shapes


class DomainError(DistillLabError, ValueError):
    """A scalar argument or a result lies outside its valid domain."""


class AllocationError(DomainError):
    """An epoch allocation cannot satisfy its constraints."""


class ConvergenceError(DistillLabError, ArithmeticError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class ContractError(DistillLabError, RuntimeError):
    """An object was used outside of its contract (e.g. a stale cache)."""


class CheckpointError(DistillLabError, OSError):
    """Reading or writing a checkpoint failed."""


class CheckpointIntegrityError(CheckpointError):
    """A checkpoint file is corrupt or not a checkpoint at all."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint uses a format version this build cannot read."""

    def __init__(self, found, supported: Iterable[int]):
        self.found = found
        self.supported = tuple(supported)
        super().__init__(
            f"Unsupported checkpoint format version {found!r}; "
            f"supported versions: {', '.join(str(v) for v in self.supported)}"
        )


class PlanError(DistillLabError, ValueError):
    """A training plan is inconsistent with its inputs."""


class ConfigError(DistillLabError, ValueError):
    """An experiment configuration is malformed."""


class ParseError(ConfigError):
    """A data file could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        location = ""
        if path is not None:
            location = f"{path}"
        if line is not None:
            location = f"{location}:{line}" if location else f"line {line}"
        super().__init__(f"{location}: {message}" if location else message)
