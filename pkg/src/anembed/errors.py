"""Exception hierarchy shared by all modules."""


class AnembedError(Exception):
    """Base class for every error raised by this package."""


class GraphFormatError(AnembedError, ValueError):
    """An input text file (edges, attributes, labels) is malformed."""


class SplitError(AnembedError, ValueError):
    """A link split or negative sample cannot be produced."""


class ArtifactFormatError(AnembedError):
    """A binary artifact cannot be decoded."""


class ArtifactVersionError(ArtifactFormatError):
    """The artifact's magic header does not match the expected version."""


class ChecksumError(ArtifactFormatError):
    """The artifact's integrity checksum does not match its payload."""


class ShapeMismatchError(AnembedError, ValueError):
    """Two artifacts disagree on node count, feature count or widths."""


class NonFiniteError(AnembedError, FloatingPointError):
    """A gradient or loss became NaN or infinite during training."""
