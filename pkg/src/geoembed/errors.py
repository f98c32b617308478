"""Exception types raised across the package."""


class MeshFormatError(ValueError):
    """A mesh file could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class EmptyMeshError(ValueError):
    """The mesh has no usable faces."""


class DegenerateGeometryError(ValueError):
    """Geometry is too degenerate for the requested operation."""


class ChecksumMismatchError(ValueError):
    """A stored artifact is bound to a different mesh."""


class ShapeError(ValueError):
    """Array dimensions do not agree."""


class NumericError(FloatingPointError):
    """Non-finite values appeared during a computation."""

    def __init__(self, message, stage=None):
        self.stage = stage
        super().__init__(f"[{stage}] {message}" if stage else message)


class PartialPathError(RuntimeError):
    """Path tracing stopped before reaching the source.

    The points traced so far are kept in ``prefix``.
    """

    def __init__(self, message, prefix):
        self.prefix = prefix
        super().__init__(message)
