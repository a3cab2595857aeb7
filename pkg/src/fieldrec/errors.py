"""Exception types shared across the package."""


class FieldRecError(Exception):
    """Base class for all library errors."""


class FormatError(FieldRecError):
    """A file could not be parsed in its declared format."""

    def __init__(self, message, path=None, line=None):
        if line is not None:
            message = f"{message} (line {line})"
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path
        self.line = line


class EmptyInputError(FieldRecError):
    """An operation received an empty point set or mesh."""


class ArgumentError(FieldRecError):
    """A caller-supplied argument violates a precondition."""


class ScaleZeroError(FieldRecError):
    """Normalization of a degenerate (all-coincident) point set."""


class InsufficientPointsError(FieldRecError):
    """A point set is too small for the requested neighborhood sizes."""


class DegenerateMeshError(FieldRecError):
    """A mesh has no usable (positive-area) faces."""


class DegenerateGradientError(FieldRecError):
    """A field gradient vanished where a direction was required."""


class EmptyLevelSetError(FieldRecError):
    """Isosurface extraction produced no geometry where some was required."""


class NoSupportError(FieldRecError):
    """An MLS query found no neighbors even after support expansion."""


class QualityError(FieldRecError):
    """Output quality fell below a contract threshold."""


class ContractError(FieldRecError):
    """An internal API contract was violated (e.g. non-scalar backward root)."""


class UnsupportedOpError(FieldRecError):
    """A graph operation lacks the derivative rule the caller asked for."""


class TrainingDivergedError(FieldRecError):
    """Training loss became non-finite or exploded."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class StageError(FieldRecError):
    """A pipeline stage failed; earlier artifacts are preserved."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
