"""Exception types raised across the package."""


class NerflocError(Exception):
    """Base class for all package errors."""


# geometry
class NonPositiveDepth(NerflocError, ValueError):
    pass


class OutOfBounds(NerflocError, ValueError):
    pass


class EmptyInput(NerflocError, ValueError):
    pass


# scene field / rendering
class LayerOutOfRange(NerflocError, ValueError):
    pass


class NegativeDensity(NerflocError, ValueError):
    pass


class NonPositiveDelta(NerflocError, ValueError):
    pass


class StrideMismatch(NerflocError, ValueError):
    pass


# training
class AllMasked(NerflocError, ValueError):
    pass


class EmptyDataset(NerflocError, ValueError):
    pass


# matcher
class BadShape(NerflocError, ValueError):
    pass


class LowOpacityScene(NerflocError, RuntimeError):
    pass


class ZeroVector(NerflocError, ValueError):
    pass


class NoGroundTruth(NerflocError, ValueError):
    pass


class NoMatches(NerflocError, ValueError):
    pass


class MissingPairs(NerflocError, ValueError):
    pass


# pose solver
class DegenerateConfiguration(NerflocError, ValueError):
    pass


class TooFewMatches(NerflocError, ValueError):
    pass


class NoConsensus(NerflocError, RuntimeError):
    pass


# retrieval
class KTooLarge(NerflocError, ValueError):
    pass


class AllEmpty(NerflocError, ValueError):
    pass


class EmptyAfterFilter(NerflocError, ValueError):
    pass


# data / io
class MissingPoses(NerflocError, FileNotFoundError):
    pass


class MalformedLine(NerflocError, ValueError):
    def __init__(self, path, line_number: int, line: str):
        self.path = path
        self.line_number = line_number
        self.line = line
        super().__init__(f"{path}:{line_number}: malformed line {line!r}")


class MissingCheckpoint(NerflocError, FileNotFoundError):
    pass


class EmptyQuerySet(NerflocError, ValueError):
    pass


class UnknownConfigKey(NerflocError, KeyError):
    pass
