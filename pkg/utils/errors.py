"""
Exception hierarchy for folxray.
Each exception class carries the process exit code the CLI maps it to.
"""


class FolxrayError(RuntimeError):
    """Base class for all laboratory failures"""

    exit_code = 1


class ValidationError(FolxrayError):
    """Invalid input, configuration or precondition"""

    exit_code = 2


class DomainError(ValidationError):
    """Point or parameter outside the admissible domain"""


class DegenerateFoliationError(ValidationError):
    """The foliation gradient vanishes where it is needed"""


class CoverageError(ValidationError):
    """Tabulated data does not cover the requested parameters"""


class WindowError(ValidationError):
    """Probe footprint leaves the window where the probe field is exact"""


class NumericFailure(FolxrayError):
    """A numerical certificate, integrator or solver failed"""

    exit_code = 3


class IntegrationFailure(NumericFailure):
    """Geodesic did not leave M' within the parameter bound"""


class CertificateFailure(NumericFailure):
    """Sampled geodesic violates the convexity certificate"""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class DampingViolation(NumericFailure):
    """Weight factor exceeds the Gaussian damping bound"""

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class NonConvergence(NumericFailure):
    """Iterative solver stagnated or ran out of iterations"""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class StorageError(FolxrayError):
    """Reading or writing run files failed"""

    exit_code = 4
