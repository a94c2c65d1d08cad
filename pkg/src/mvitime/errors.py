"""Exception hierarchy.

Every error family maps to a distinct CLI exit code (see ``EXIT_CODES``).
"""


class MViTimeError(Exception):
    exit_code = 1


# ---- ingestion -------------------------------------------------------------

class IngestError(MViTimeError):
    exit_code = 3


class MalformedHeader(IngestError):
    pass


class TruncatedData(IngestError):
    pass


class DegenerateScale(IngestError):
    pass


class CoverageGap(IngestError):
    pass


class SampleRateMismatch(IngestError):
    pass


class ChannelNotFound(IngestError):
    pass


# ---- augmentation / contrastive ---------------------------------------------

class AugmentError(MViTimeError):
    exit_code = 4


class InvalidSegmentCount(AugmentError, ValueError):
    pass


class ContrastiveError(MViTimeError):
    exit_code = 4


class ZeroNorm(ContrastiveError, ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class InvalidPairing(ContrastiveError, ValueError):
    pass


class NonPositiveTemperature(ContrastiveError, ValueError):
    pass


class MissingStage(ContrastiveError):
    def __init__(self, message, subjects=()):
        super().__init__(message)
        self.subjects = tuple(subjects)


class RankDeficient(ContrastiveError):
    pass


# ---- model -------------------------------------------------------------------

class ModelError(MViTimeError):
    exit_code = 5


class ShapeMismatch(ModelError, ValueError):
    pass


class IndivisibleLength(ModelError, ValueError):
    pass


class CheckpointVersionError(ModelError):
    pass


# ---- training ----------------------------------------------------------------

class TrainError(MViTimeError):
    exit_code = 6


class StepOutOfRange(TrainError, ValueError):
    pass


class EmptyDataset(TrainError):
    pass


class ConfigMismatch(TrainError):
    pass


class DimMismatch(TrainError):
    pass


# ---- evaluation ----------------------------------------------------------------

class EvalError(MViTimeError):
    exit_code = 7


class LengthMismatch(EvalError, ValueError):
    pass


class EmptyMatrix(EvalError, ValueError):
    pass


class UnknownSubject(EvalError, KeyError):
    pass


class SubjectOverlap(EvalError):
    pass


# ---- configuration -------------------------------------------------------------

class ConfigError(MViTimeError):
    exit_code = 8


EXIT_CODES = {
    "ok": 0,
    "usage": 2,
    "ingest": IngestError.exit_code,
    "contrastive": ContrastiveError.exit_code,
    "model": ModelError.exit_code,
    "train": TrainError.exit_code,
    "eval": EvalError.exit_code,
    "config": ConfigError.exit_code,
}
