"""Exception hierarchy.

Every error carries a short machine-readable ``kind`` so the CLI can emit
structured JSON without string matching.
"""

from __future__ import annotations


class VolterraError(Exception):
    kind = "error"

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": str(self)}


class ParseError(VolterraError, ValueError):
    kind = "parse_error"

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset
        self.reason = message

    def to_dict(self) -> dict:
        return {"error": self.kind, "message": self.reason, "offset": self.offset}


class EvalError(VolterraError, ValueError):
    """Unbound variable or domain violation during evaluation."""

    kind = "domain_error"


class ProblemError(VolterraError, ValueError):
    """Malformed problem description."""

    kind = "problem_error"


class ValidationError(VolterraError):
    """A structural hypothesis on the problem failed."""

    kind = "validation_failed"

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report

    def to_dict(self) -> dict:
        d = super().to_dict()
        if self.report is not None:
            d["report"] = self.report.to_dict()
        return d


class PreconditionError(VolterraError):
    kind = "precondition_failed"


class SingularKernelError(VolterraError):
    kind = "singular_kernel"


class StepPlanError(VolterraError):
    kind = "step_plan_failed"


class ConvergenceError(VolterraError):
    """Successive approximations did not converge."""

    kind = "no_convergence"

    def __init__(self, message: str, iterations: int = 0, residual: float = float("nan"),
                 non_contractive: bool = False):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual
        self.non_contractive = non_contractive

    def to_dict(self) -> dict:
        d = super().to_dict()
        d.update(iterations=self.iterations, residual=self.residual,
                 non_contractive=self.non_contractive)
        return d


class CharOpError(VolterraError):
    kind = "charop_error"


class UnresolvedIndexError(VolterraError):
    kind = "unresolved_index"


class TaylorError(VolterraError):
    kind = "taylor_error"


class ExpansionError(VolterraError):
    kind = "expansion_failed"


class RefineError(VolterraError):
    kind = "refine_failed"
