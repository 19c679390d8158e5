"""Exception hierarchy shared by all stages."""


class StgridError(Exception):
    """Base class. ``code`` is a stable machine-readable identifier."""

    code = "error"

    def __init__(self, message, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self):
        return {"error": self.code, "message": str(self), **self.details}


class ValidationError(StgridError):
    """Bad input detected before any computation runs (CLI exit code 2)."""

    code = "validation"


class MissingCell(ValidationError):
    code = "missing_cell"


class DimensionMismatch(ValidationError):
    code = "dimension_mismatch"


class OutOfBounds(ValidationError):
    code = "out_of_bounds"


class DegenerateGrid(ValidationError):
    code = "degenerate_grid"


class TooFewFrames(ValidationError):
    code = "too_few_frames"


class ShapeMismatch(ValidationError):
    code = "shape_mismatch"


class DimMismatch(ShapeMismatch):
    code = "dim_mismatch"


class ResolutionMismatch(ShapeMismatch):
    code = "resolution_mismatch"


class SizeMismatch(ShapeMismatch):
    code = "size_mismatch"


class DegenerateTarget(ValidationError):
    code = "degenerate_target"


class AlignmentError(ValidationError):
    code = "alignment"


class SpecError(ValidationError):
    code = "spec"


class FormatError(ValidationError):
    code = "format"


class NonFiniteLogit(StgridError):
    code = "non_finite_logit"


class MissingCache(StgridError):
    code = "missing_cache"


class MissingFlow(StgridError):
    code = "missing_flow"


class EditorFailure(StgridError):
    code = "editor_failure"


class DivergenceDetected(StgridError):
    code = "divergence"
