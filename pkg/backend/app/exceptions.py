"""Domain error hierarchy"""
from typing import Any, Dict, Optional


class SnowDensityError(Exception):
    """Base class for all errors raised by the engine"""

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_record(self) -> Dict[str, Any]:
        """Machine-readable form used by the CLI error line and the API"""
        record: Dict[str, Any] = {"type": type(self).__name__, "message": self.message}
        record.update({k: v for k, v in self.context.items() if v is not None})
        return record


class DomainError(SnowDensityError, ValueError):
    """Argument outside the mathematical domain of a transform"""


class SplineError(SnowDensityError, ValueError):
    """Invalid spline knots"""


class DegenerateCoreError(SnowDensityError, ValueError):
    """A core has fewer measured depths than design columns"""


class FactorizationError(SnowDensityError, RuntimeError):
    """Matrix not positive definite even after the maximum jitter"""


class SemivariogramFitError(SnowDensityError, RuntimeError):
    """Exponential semivariogram fit did not converge"""


class DatasetError(SnowDensityError, ValueError):
    """Dataset parse or validation failure"""

    def __init__(self, message: str, line: Optional[int] = None, **context: Any):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message, line=line, **context)
        self.line = line


class ConfigError(SnowDensityError, ValueError):
    """Run configuration failed schema validation"""


class SimulationError(SnowDensityError, RuntimeError):
    """Synthetic data generation could not satisfy the model support"""


class SamplerError(SnowDensityError, RuntimeError):
    """Failure inside the Markov chain, tagged with where it happened"""

    def __init__(self, message: str, iteration: int, block: str, **context: Any):
        super().__init__(f"{block} @ iteration {iteration}: {message}",
                         iteration=iteration, block=block, **context)
        self.iteration = iteration
        self.block = block
