"""
Exception hierarchy shared by the solver, blending, intent and task layers.

Every exception carries the process exit code the CLI maps it to:
domain failures exit 2, configuration and artifact problems exit 1.
"""
from typing import Optional


class ThrowAssistError(Exception):
    """Base class for all errors raised by this package"""

    exit_code = 1


class DomainError(ThrowAssistError):
    """A numerical or modelling failure inside a pipeline stage"""

    exit_code = 2


class ConfigError(ThrowAssistError, ValueError):
    """Configuration file missing, unreadable or violating the schema"""

    exit_code = 1


class ArtifactError(ThrowAssistError):
    """A required input artifact (policy, model, stream) is missing or corrupt"""

    exit_code = 1


class NonFiniteState(DomainError):
    """Integration produced NaN or Inf"""

    def __init__(self, message: str, index: Optional[int] = None):
        if index is not None:
            message = f"{message} (step {index})"
        super().__init__(message)
        self.index = index


class HorizonMismatch(DomainError):
    pass


class NonPositiveDefinite(DomainError):
    """Control Hessian of the Q-function is not positive definite"""

    def __init__(self, k: int, reg: float):
        super().__init__(f"Q_uu not positive definite at k={k} with reg={reg:g}")
        self.k = k
        self.reg = reg


class NoProgress(DomainError):
    pass


class IndexOutOfHorizon(DomainError):
    pass


class AllWeightsZero(DomainError):
    pass


class IncompatiblePolicies(DomainError):
    pass


class DegenerateLabels(DomainError):
    pass


class RankDeficient(DomainError):
    pass


class NoOnset(DomainError):
    pass


class InsufficientHistory(DomainError):
    pass


class SingularJacobian(DomainError):
    pass


class UnreachableHoop(DomainError):
    pass


class NeverReachesHoopHeight(DomainError):
    pass
