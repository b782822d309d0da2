"""Exception hierarchy shared by every module."""


class CqdcError(Exception):
    """Base class for all toolkit errors."""


class UnsupportedPair(CqdcError):
    pass


class SolverFailure(CqdcError):
    def __init__(self, reason, residual=float("nan")):
        super().__init__(f"{reason} (residual={residual:.3e})")
        self.reason = reason
        self.residual = residual


class Infeasible(SolverFailure):
    def __init__(self, reason="no strictly feasible point"):
        super().__init__(reason)


class DegenerateActiveSet(CqdcError):
    pass


class RankDeficient(CqdcError):
    pass


class SingularRegression(CqdcError):
    pass


class UnknownSystem(CqdcError):
    pass


class SampleFailure(CqdcError):
    pass


class Unreachable(CqdcError):
    pass


class DegenerateDirection(CqdcError):
    pass


class LengthMismatch(CqdcError):
    pass


class RefinementFailure(CqdcError):
    pass


class ParseError(CqdcError):
    def __init__(self, message, line=None, field=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(message + suffix)
        self.line = line
        self.field = field


class ValidationError(CqdcError):
    def __init__(self, invariant, detail=""):
        super().__init__(invariant if not detail else f"{invariant}: {detail}")
        self.invariant = invariant


class EvaluatorFailure(CqdcError):
    """An evaluator raised while processing one Monte-Carlo sample."""

    def __init__(self, index, cause):
        super().__init__(f"evaluation failed at sample {index}: {cause}")
        self.index = index
        self.cause = cause
