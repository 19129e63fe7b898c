"""Exception hierarchy shared across the package."""


class CoverageError(Exception):
    """Base class for all errors raised by covmpc."""


class CoincidentGenerators(CoverageError):
    pass


class OutsideArena(CoverageError):
    pass


class EmptyPolygon(CoverageError):
    pass


class TooFewAgents(CoverageError):
    pass


class ShapeMismatch(CoverageError):
    pass


class DimensionMismatch(CoverageError):
    pass


class BadShift(CoverageError):
    pass


class BudgetDomain(CoverageError):
    pass


class DomainError(CoverageError):
    pass


class PlannerInfeasible(CoverageError):
    pass


class TrackerInfeasible(CoverageError):
    """The tracking MPC has no feasible solution.

    Carries optional forensic information (agent index, time step) so a
    coordinator abort can be traced back.
    """

    def __init__(self, message, agent=None, step=None):
        super().__init__(message)
        self.agent = agent
        self.step = step


class CertificationFailed(CoverageError):
    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class MissingVote(CoverageError):
    pass


class EmptyLog(CoverageError):
    pass


class ConfigError(CoverageError):
    pass
