"""Exception hierarchy shared by all stmg_lab modules."""


class StmgError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(StmgError):
    """Tensor or parameter shapes are incompatible."""


class ContractError(StmgError):
    """An operation's precondition was violated by the caller."""


class ConfigError(StmgError):
    """A configuration value is out of its legal range."""


class DegenerateNeighborhoodError(StmgError):
    """A softmax row has no unmasked entry to normalize over."""


class CovarianceError(StmgError):
    """A covariance matrix is singular or not positive definite."""


class GeometryError(StmgError):
    """A bounding box or region is degenerate."""


class DegenerateMapError(StmgError):
    """A map is constant where a nonzero spread is required."""


class EmptyFixationsError(StmgError):
    """A fixation set that must be nonempty is empty."""


class NodeLookupError(StmgError):
    """A node id is not present in the graph."""


class FrameRangeError(StmgError):
    """A frame index lies outside the sequence."""


class SceneFormatError(StmgError):
    """A scene or checkpoint container failed to parse.

    Carries the byte offset and, when meaningful, the line number of the
    first unparseable token.
    """

    def __init__(self, message, *, line=None, offset=None):
        detail = message
        if line is not None:
            detail += f" (line {line})"
        if offset is not None:
            detail += f" (byte offset {offset})"
        super().__init__(detail)
        self.line = line
        self.offset = offset


class UnsupportedVersionError(SceneFormatError):
    """A container declares a version this build does not read."""
