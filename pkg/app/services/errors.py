from __future__ import annotations

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


class SimulationError(Exception):
    exit_code = EXIT_NUMERIC


class DimensionError(SimulationError, ValueError):
    pass


class ArgumentError(SimulationError, ValueError):
    pass


class HermiticityError(SimulationError, ValueError):
    def __init__(self, message: str, defect: float | None = None):
        super().__init__(message)
        self.defect = defect


class SingularityError(SimulationError, ArithmeticError):
    pass


class DomainError(SimulationError, ValueError):
    pass


class QuadratureError(SimulationError, ArithmeticError):
    def __init__(self, message: str, value: float | None = None, abserr: float | None = None):
        super().__init__(message)
        self.value = value
        self.abserr = abserr


class FitError(SimulationError, ArithmeticError):
    pass


class FitQualityError(FitError):
    def __init__(self, message: str, rms_residual: float, threshold: float):
        super().__init__(message)
        self.rms_residual = rms_residual
        self.threshold = threshold


class DegenerateSpectrumError(SimulationError, ValueError):
    pass


class IntegrationError(SimulationError, ArithmeticError):
    def __init__(self, message: str, time: float, trace_deviation: float):
        super().__init__(message)
        self.time = time
        self.trace_deviation = trace_deviation


class SweepError(SimulationError):
    def __init__(self, message: str, lambda_bar: float):
        super().__init__(message)
        self.lambda_bar = lambda_bar


class ConfigError(ValueError):
    exit_code = EXIT_CONFIG

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
