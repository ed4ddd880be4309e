"""Exception types shared across the engine."""


class SeroError(Exception):
    """Base class for all engine errors."""


# corpus ------------------------------------------------------------------

class MalformedRow(SeroError):
    def __init__(self, file: str, line: int, reason: str):
        self.file = file
        self.line = line
        self.reason = reason
        super().__init__(f"{file}:{line}: {reason}")


class InvariantViolation(SeroError):
    """A dataset invariant failed (e.g. decreasing cumulative doses)."""

    def __init__(self, message: str, report: list | None = None):
        self.report = report or []
        super().__init__(message)


class EmptyDeliverySet(SeroError):
    pass


class DegenerateCovariate(SeroError):
    pass


class DateOutOfRange(SeroError):
    pass


# allocation / completion --------------------------------------------------

class EmptySupport(SeroError):
    pass


class NoEarlierReport(SeroError):
    pass


class ZeroWindow(SeroError):
    pass


class DegenerateWeights(SeroError):
    pass


class UndefinedLogArgument(SeroError):
    pass


class InfeasibleSplit(SeroError):
    pass


class ZeroLaggedDoses(SeroError):
    pass


# efficacy -----------------------------------------------------------------

class NonFiniteIntegrand(SeroError):
    pass


class OptimizationFailed(SeroError):
    pass


# infection ----------------------------------------------------------------

class NonpositiveBound(SeroError):
    pass


class NoSurveys(SeroError):
    pass


# mcmc ---------------------------------------------------------------------

class InsufficientDraws(SeroError):
    pass


class InitializationFailed(SeroError):
    pass


class NonFiniteLogdensity(SeroError):
    def __init__(self, message: str, state: dict | None = None):
        self.state = state
        super().__init__(message)


class ImproperPosterior(SeroError):
    """A flat-prior propriety condition failed; fitting refuses to start."""

    def __init__(self, message: str, witness=None):
        self.witness = witness
        super().__init__(message)


# pipeline -----------------------------------------------------------------

class MissingCountryDraws(SeroError):
    pass


class ConfigError(SeroError):
    pass
