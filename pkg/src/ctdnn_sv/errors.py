"""Exception types raised across the package."""


class CtdnnSvError(Exception):
    """Base class for all package errors."""


# audio / features
class WavError(CtdnnSvError):
    pass


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class EmptyDataError(WavError):
    pass


class EmptyFeatureError(CtdnnSvError):
    pass


# network
class ShapeError(CtdnnSvError, ValueError):
    pass


class UsageError(CtdnnSvError, RuntimeError):
    pass


class ConfigError(CtdnnSvError, ValueError):
    pass


class TooShortError(CtdnnSvError, ValueError):
    pass


class LengthError(CtdnnSvError, ValueError):
    pass


# files
class FormatError(CtdnnSvError):
    pass


class TruncatedFileError(FormatError):
    pass


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


# training / scoring
class NonFiniteLossError(CtdnnSvError, FloatingPointError):
    def __init__(self, msg, lr=None, batch=None):
        super().__init__(msg)
        self.lr = lr
        self.batch = batch


class LabelingError(CtdnnSvError, KeyError):
    pass


class EnrollmentError(CtdnnSvError, ValueError):
    pass


class NumericalError(CtdnnSvError, ArithmeticError):
    def __init__(self, msg, iteration=None):
        super().__init__(msg)
        self.iteration = iteration


class PreconditionError(CtdnnSvError, ValueError):
    pass


class UndefinedScoreError(CtdnnSvError, ValueError):
    pass


class TrialListError(CtdnnSvError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class DependencyError(CtdnnSvError, FileNotFoundError):
    pass
