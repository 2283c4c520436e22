"""Exception types raised across the package.

CLI exit codes are attached to the three top-level families so the runner can
map any failure to a process status without inspecting messages.
"""


class RankGuardError(Exception):
    exit_code = 1


class ConfigError(RankGuardError):
    exit_code = 2


class DataError(RankGuardError):
    exit_code = 3


class NumericalError(RankGuardError):
    exit_code = 4


# data problems
class IngestError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKey(IngestError):
    pass


class InvalidValue(DataError):
    pass


class DegenerateCrossSection(DataError):
    pass


class InsufficientUniverse(DataError):
    pass


class EmptyTrainSet(DataError):
    pass


class GenerationError(ConfigError):
    pass


# numerical problems
class UndefinedCorrelation(NumericalError):
    pass


class UndefinedAUROC(NumericalError):
    pass


class SingularDesign(NumericalError):
    pass


class UndefinedSharpe(NumericalError):
    pass
