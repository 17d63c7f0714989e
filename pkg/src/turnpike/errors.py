"""Exception hierarchy shared by all solver modules."""

from __future__ import annotations


class TurnpikeError(Exception):
    """Base class for every error raised by the package."""

    #: process exit code used by the command line front end
    exit_code = 1


class ValidationError(TurnpikeError):
    exit_code = 2


class UnknownProblem(ValidationError):
    pass


class InvalidParams(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class InsufficientSweep(ValidationError):
    pass


class MismatchedSteadyState(ValidationError):
    pass


class NumericalError(TurnpikeError):
    exit_code = 3


class NonFiniteDynamics(NumericalError):
    pass


class NonFiniteDerivative(NumericalError):
    pass


class MaximizationStalled(NumericalError):
    pass


class SingularKKT(NumericalError):
    pass


class NoConvergence(NumericalError):
    """Iterative solver stopped without meeting its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0, **info):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.info = info


class IllConditioned(NumericalError):
    pass


class IntegrationBlowup(NumericalError):
    def __init__(self, message, t=float("nan")):
        super().__init__(message)
        self.t = t


class Unbounded(NumericalError):
    pass


class FitDegenerate(NumericalError):
    pass


class InternalContractViolation(TurnpikeError):
    pass


class AssumptionError(TurnpikeError):
    """A structural hypothesis of the turnpike theory fails at this instance."""

    exit_code = 4


class AssumptionViolated(AssumptionError):
    def __init__(self, message, which=""):
        super().__init__(message)
        self.which = which


class NonConcaveHamiltonian(AssumptionError):
    pass


class SingularM(AssumptionError):
    pass


class NotHyperbolic(AssumptionError):
    pass


class SubspaceDegenerate(AssumptionError):
    pass


class RiccatiResidualTooLarge(AssumptionError):
    pass


class KernelOverlap(AssumptionError):
    pass


class FormulaMismatch(AssumptionError):
    pass


class RNotPositive(AssumptionError):
    pass


class NotControllable(AssumptionError):
    pass


class AdjointInconsistent(UserWarning):
    """Multipliers of the y-defects are not constant along the mesh."""
