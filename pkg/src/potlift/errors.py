"""Exception types raised across the package."""


class PotliftError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PotliftError, ValueError):
    pass


class NonFiniteInput(PotliftError, ValueError):
    pass


class NonScalarLoss(PotliftError, ValueError):
    pass


class TapeConsumed(PotliftError, RuntimeError):
    """Raised when backward is replayed on a tape that was already used."""


class DisconnectedGraph(PotliftError, ValueError):
    pass


class IndexOutOfRange(PotliftError, IndexError):
    pass


class SelfLoop(PotliftError, ValueError):
    pass


class DuplicateEdge(PotliftError, ValueError):
    pass


class NonPositiveSigma(PotliftError, ValueError):
    pass


class NonPositiveDepth(PotliftError, ValueError):
    pass


class SchemaViolation(PotliftError, ValueError):
    pass


class JointCountMismatch(PotliftError, ValueError):
    pass


class EmptyDataset(PotliftError, ValueError):
    pass


class CheckpointMismatch(PotliftError, ValueError):
    pass


class ConfigError(PotliftError, ValueError):
    pass
