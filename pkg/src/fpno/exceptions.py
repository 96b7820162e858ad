"""Exception types raised across the package."""


class FpnoError(Exception):
    """Base class for all package errors."""


class InvalidMesh(FpnoError, ValueError):
    pass


class Unsupported(FpnoError, ValueError):
    pass


class TransferError(FpnoError, ValueError):
    pass


class DimensionError(FpnoError, ValueError):
    pass


class ElementInversion(FpnoError, ArithmeticError):
    """A deformation gradient with non-positive determinant was encountered."""


class SingularMatrix(FpnoError, ArithmeticError):
    pass


class CovarianceNotPD(FpnoError, ArithmeticError):
    pass


class ModelNaN(FpnoError, ArithmeticError):
    pass


class StateError(FpnoError, RuntimeError):
    pass


class DataGenFailure(FpnoError, RuntimeError):
    pass


class OptStepError(FpnoError, ArithmeticError):
    pass


class TrainingAborted(FpnoError, RuntimeError):
    """Training hit a non-finite loss; ``model`` holds the last good checkpoint."""

    def __init__(self, message, model=None, history=None):
        super().__init__(message)
        self.model = model
        self.history = history


class FormatError(FpnoError, ValueError):
    pass
