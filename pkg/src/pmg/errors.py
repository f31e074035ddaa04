class PMGError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PMGError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class GranularityError(PMGError, ValueError):
    pass


class DivisibilityError(PMGError, ValueError):
    pass


class StageIndexError(PMGError, IndexError):
    pass


class ShapeError(PMGError, ValueError):
    pass


class LabelError(PMGError, ValueError):
    pass


class TrainingDivergenceError(PMGError, FloatingPointError):
    def __init__(self, message, parameter=None):
        self.parameter = parameter
        super().__init__(message)


class EvaluationError(PMGError, ValueError):
    pass


class DatasetItemError(PMGError, OSError):
    def __init__(self, message, path=None):
        self.path = path
        super().__init__(message)


class CheckpointError(PMGError):
    pass


class IntegrityError(CheckpointError):
    pass


class DegenerateTestError(PMGError, ValueError):
    pass
