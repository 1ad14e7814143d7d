"""Exception hierarchy shared by every stage of the pipeline.

Each class carries the CLI exit code it maps to (1 I/O, 2 invalid input,
3 estimation failure) and a short machine-readable ``code``.
"""

from __future__ import annotations


class LightFieldError(Exception):
    exit_code = 2
    code = "error"

    def __init__(self, detail: str, *, stage: str | None = None):
        super().__init__(detail)
        self.detail = detail
        self.stage = stage

    def cli_line(self, default_stage: str = "unknown") -> str:
        stage = self.stage or default_stage
        detail = " ".join(str(self.detail).split())
        return f"stage={stage} code={self.code} detail={detail}"


class FormatError(LightFieldError):
    exit_code = 1
    code = "format"


class MissingViewError(LightFieldError):
    exit_code = 1
    code = "missing_view"

    def __init__(self, missing: list[tuple[int, int]], *, stage: str | None = None):
        self.missing = list(missing)
        listed = ", ".join(f"({s},{t})" for s, t in self.missing)
        super().__init__(f"missing views {listed}", stage=stage)


class InconsistencyError(LightFieldError):
    code = "inconsistent"


class RangeError(LightFieldError, IndexError):
    code = "range"


class ParameterError(LightFieldError, ValueError):
    code = "parameter"


class GeometryError(LightFieldError, ValueError):
    """Scene geometry that cannot be rendered (plane behind a camera, bad depth)."""

    code = "geometry"


class EstimationError(LightFieldError):
    exit_code = 3
    code = "estimation"


class NoStructureError(EstimationError):
    code = "no_structure"


class InsufficientFeaturesError(EstimationError):
    code = "insufficient_features"


class DegenerateGeometryError(EstimationError):
    code = "degenerate"


class AmbiguousDecompositionError(EstimationError):
    code = "ambiguous_decomposition"


class HullTooSparseError(EstimationError):
    code = "hull_too_sparse"


class StageError(LightFieldError):
    """Wraps a failure inside :func:`lfstitch.stitch.stitch` with its context."""

    def __init__(self, cause: LightFieldError, *, stage: str, index: int):
        self.cause = cause
        self.index = index
        self.exit_code = cause.exit_code
        self.code = cause.code
        super().__init__(f"light_field={index} {cause.detail}", stage=stage)
