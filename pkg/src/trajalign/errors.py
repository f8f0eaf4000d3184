"""Exception types raised across the package."""


class TrajAlignError(Exception):
    """Base class for all package errors."""


class OutOfBounds(TrajAlignError, ValueError):
    pass


class EmptyGraph(TrajAlignError, ValueError):
    pass


class InvalidTrajectory(TrajAlignError, ValueError):
    pass


class ShapeMismatch(TrajAlignError, ValueError):
    pass


class DimensionMismatch(TrajAlignError, ValueError):
    pass


class ModeMismatch(TrajAlignError, ValueError):
    pass


class EmptyQuerySet(TrajAlignError, ValueError):
    pass


class NoWaypointsOnSegment(TrajAlignError, ValueError):
    pass


class ZeroVector(TrajAlignError, ValueError):
    pass


class NonPositiveTemperature(TrajAlignError, ValueError):
    pass


class EmptyBatch(TrajAlignError, ValueError):
    pass


class NoEligibleTrajectories(TrajAlignError, ValueError):
    pass


class EmptySet(TrajAlignError, ValueError):
    pass


class NoLabeledAnchors(TrajAlignError, ValueError):
    pass


class InvalidConfig(TrajAlignError, ValueError):
    pass


class DegenerateTruth(TrajAlignError, ValueError):
    pass


class SingleClassTruth(TrajAlignError, ValueError):
    pass


class NotOnSimplex(TrajAlignError, ValueError):
    pass


class MissingCell(TrajAlignError, KeyError):
    pass


class ParseError(TrajAlignError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class UnknownSubcommand(TrajAlignError, ValueError):
    pass
