"""Exception hierarchy shared across the pipeline."""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


# --- volume I/O ---

class MissingFileError(PipelineError):
    pass


class MalformedHeaderError(PipelineError):
    pass


class NonScalarVolumeError(PipelineError):
    """File is not a scalar 3D volume; carries the actual dimensionality."""

    def __init__(self, ndim):
        self.ndim = ndim
        super().__init__(f"expected a scalar 3D volume, got {ndim}D data")


class IoFailureError(PipelineError):
    pass


# --- preprocessing / data handling ---

class DegenerateWindowError(PipelineError):
    pass


class TooFewCasesError(PipelineError):
    pass


class ShapeMismatchError(PipelineError):
    pass


# --- mask ops ---

class EmptyLiverError(PipelineError):
    pass


# --- models ---

class UntrainedModelError(PipelineError):
    pass


class EmptyDatasetError(PipelineError):
    pass


class IndivisibleShapeError(PipelineError):
    pass


class BadRangeError(PipelineError):
    pass


class StepOutOfRangeError(PipelineError):
    pass


class NonNormalInputError(PipelineError):
    pass


class CheckpointVersionError(PipelineError):
    pass


# --- segmenter ---

class WrongChannelCountError(PipelineError):
    pass


class EmptyInputError(PipelineError):
    pass


class NoDataError(PipelineError):
    pass


# --- metrics ---

class EmptyListError(PipelineError):
    pass


# --- phantom / config / cli ---

class BadConfigError(PipelineError):
    pass


class ConfigParseError(PipelineError):
    pass


class ConfigInvalidError(PipelineError):
    """Carries the full list of field-path validation errors."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class MissingArtifactError(PipelineError):
    pass


class NoResultsError(PipelineError):
    pass
