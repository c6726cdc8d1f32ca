"""Exception hierarchy shared by every uaplab module."""


class UAPLabError(Exception):
    """Base class for all library errors."""


# model-core
class UnknownArchitecture(UAPLabError):
    pass


class ShapeMismatch(UAPLabError):
    pass


class InvalidInput(UAPLabError):
    pass


class InvalidClass(UAPLabError):
    pass


class EmptyDataset(UAPLabError):
    pass


class LabelOutOfRange(UAPLabError):
    pass


class CheckpointError(UAPLabError):
    pass


class VersionMismatch(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


# data-pipeline
class EmptyResult(UAPLabError):
    pass


class InvalidSigma(UAPLabError):
    pass


class MissingImage(UAPLabError):
    pass


class BadGrade(UAPLabError):
    pass


class MalformedCsv(UAPLabError):
    pass


class BadProportions(UAPLabError):
    pass


class ClassTooSmall(UAPLabError):
    pass


# attacks
class InvalidBudget(UAPLabError):
    pass


class MaxIterExceeded(UAPLabError):
    pass


class TargetNotReached(UAPLabError):
    """Raised when a UAP run exhausts its passes below the target ratio.

    The best perturbation found so far travels with the exception.
    """

    def __init__(self, message, perturbation=None, best_ratio=None):
        super().__init__(message)
        self.perturbation = perturbation
        self.best_ratio = best_ratio


# robustness
class SourceMismatch(UAPLabError):
    pass


class EmptyVotes(UAPLabError):
    pass


class EmptyZoo(UAPLabError):
    pass


class MissingPerturbation(UAPLabError):
    pass


# analysis
class LengthMismatch(UAPLabError):
    pass


class DegenerateMarginals(UAPLabError):
    pass


class DegenerateVariance(UAPLabError):
    pass


class OutOfRange(UAPLabError):
    pass


class UnsupportedFormat(UAPLabError):
    pass
