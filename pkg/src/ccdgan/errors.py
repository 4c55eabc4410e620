"""Exception hierarchy shared by every module of the package.

CLI exit codes map onto three families: usage (1), data (2) and
numerical (3). Each concrete error carries its family through the
``exit_code`` class attribute.
"""

from __future__ import annotations


class CCDGanError(Exception):
    exit_code = 2


class DataError(CCDGanError):
    exit_code = 2


class NumericalError(CCDGanError):
    exit_code = 3


class UsageError(CCDGanError):
    exit_code = 1


# signal
class UnsupportedFormat(DataError):
    pass


class CorruptFile(DataError):
    pass


class SilentSignal(DataError):
    pass


class LengthMismatch(DataError):
    pass


class EmptySignal(DataError):
    pass


class BadFraming(UsageError):
    pass


# tfa
class SignalTooShort(DataError):
    pass


class BadConfig(UsageError):
    pass


class InconsistentConfig(DataError):
    pass


class GridTooSmall(DataError):
    pass


class MissingSourceDims(DataError):
    pass


# pencil
class NonConvergence(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


# ccgan
class ShapeMismatch(DataError):
    pass


class ZeroMatrix(NumericalError):
    pass


class StaleTrace(UsageError):
    pass


class EmptyClass(DataError):
    pass


class DivergedLoss(NumericalError):
    pass


# defense / eval
class GeneratorUnavailable(DataError):
    pass


class EmptyReference(DataError):
    pass


class EmptyBatch(DataError):
    pass


class GradientUnavailable(NumericalError):
    pass


class MissingArtifact(DataError):
    pass


class RecognizerFailure(DataError):
    pass


class ProcessFailure(RecognizerFailure):
    def __init__(self, message: str, stderr: str = ""):
        super().__init__(message)
        self.stderr = stderr


class RecognizerTimeout(RecognizerFailure):
    pass
