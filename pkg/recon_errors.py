"""
Exception hierarchy.

Validation failures (bad input files, parameters out of range) and numerical
failures (eigensolver, matrix exponential, linear solves) are kept on separate
branches so the CLI can map them to exit codes 2 and 3.
"""


class MeshReconError(Exception):
    """Base class for every error raised by this package."""


class ReconValidationError(MeshReconError, ValueError):
    exit_code = 2


class ReconNumericalError(MeshReconError, RuntimeError):
    exit_code = 3


# --- validation -------------------------------------------------------------

class MeshError(ReconValidationError):
    pass


class DeformError(ReconValidationError):
    pass


class SchemeError(ReconValidationError):
    pass


class CodecError(ReconValidationError):
    pass


class ConfigError(ReconValidationError):
    pass


# --- numerical --------------------------------------------------------------

class EigenSolverError(ReconNumericalError):
    pass


class PropagationError(ReconNumericalError):
    pass


class TimeSteppingError(ReconNumericalError):
    pass


class ReconstructionError(ReconNumericalError):
    pass
