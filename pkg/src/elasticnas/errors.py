"""Exception hierarchy. Every class carries the CLI exit code it maps to."""


class ElasticNasError(Exception):
    exit_code = 1


class ConfigError(ElasticNasError):
    exit_code = 2


class DataError(ElasticNasError):
    exit_code = 3


class FormatError(DataError):
    exit_code = 4


class SpaceValidationError(ElasticNasError, ValueError):
    exit_code = 5


class DecodeError(SpaceValidationError):
    exit_code = 6


class InfeasibleConstraintError(ElasticNasError):
    exit_code = 7


class DivergenceError(ElasticNasError):
    exit_code = 8


class MissingCalibrationError(ElasticNasError):
    exit_code = 9


class DimensionError(ElasticNasError, ValueError):
    exit_code = 10


class RankError(ElasticNasError, ValueError):
    exit_code = 10


class NoGradientError(ElasticNasError):
    exit_code = 10


class AssemblyError(ElasticNasError, ValueError):
    exit_code = 10


class ScoringError(ElasticNasError):
    exit_code = 11


EXIT_CODES = {
    1: "unexpected internal error",
    2: "invalid configuration (message names the key path)",
    3: "dataset error (empty split, insufficient examples)",
    4: "malformed binary file (message names the byte offset)",
    5: "invalid search space or architecture",
    6: "malformed architecture encoding",
    7: "infeasible resource constraint",
    8: "training diverged (non-finite loss)",
    9: "evaluation without normalization calibration",
    10: "tensor engine misuse (shape, rank, gradient or loss assembly)",
    11: "zero-shot scoring failure",
    12: "filesystem error",
}
