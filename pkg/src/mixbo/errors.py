"""Exception hierarchy shared by the engine, the CLI and the HTTP service.

Every engine error carries a stable machine-readable ``code`` so that both
front ends can map failures onto the same envelope without inspecting
exception types. The codes double as CLI exit-code selectors.
"""

from __future__ import annotations

from typing import Any


class MixboError(Exception):
    """Base class for all engine errors."""

    code = "internal"

    def __init__(self, message: str, detail: Any = None):
        super().__init__(message)
        self.message = message
        self.detail = detail

    def to_payload(self) -> dict:
        payload = {"code": self.code, "message": self.message}
        if self.detail is not None:
            payload["detail"] = self.detail
        return payload


class SingularKernel(MixboError):
    """Kernel matrix stayed non positive definite after jitter escalation."""

    code = "internal"


class NonFiniteSample(MixboError):
    """A Monte Carlo draw produced NaN or infinity."""

    code = "internal"


class DimensionMismatch(MixboError):
    code = "invalid_input"


class InvalidInput(MixboError):
    code = "invalid_input"


class SchemaError(MixboError):
    """Malformed external file: missing columns, bad types, too few rows."""

    code = "invalid_input"


class NonPositiveMetric(MixboError):
    code = "invalid_input"


class OutOfDomain(MixboError):
    code = "invalid_input"


class EmptyDomain(MixboError):
    """Upper bounds admit no point summing to one."""

    code = "invalid_input"


class ConflictingData(MixboError):
    """Duplicate scaled inputs mapped to different targets."""

    code = "invalid_input"


class UnknownCampaign(MixboError):
    code = "not_found"


class UnknownExperiment(MixboError):
    code = "not_found"


class StateConflict(MixboError):
    """Operation not legal in the campaign's current status."""

    code = "conflict"


class IncompleteBatch(MixboError):
    """Results posted for only part of the open batch."""

    code = "conflict"


class RejectionBudgetExceeded(MixboError):
    """Dirichlet rejection sampling hit the consecutive-rejection cap."""

    code = "infeasible"


class AllStartsInfeasible(MixboError):
    """Every optimizer start ended with negligible feasibility probability.

    ``detail`` holds the best per-constraint feasibility probability seen
    across all starts, so callers can report which constraint is binding.
    """

    code = "infeasible"


class RelaxationExhausted(MixboError):
    """Constraint relaxation hit its level cap without finding feasible mass."""

    code = "infeasible"


class DegenerateDataWarning(UserWarning):
    """Targets with zero spread; the model falls back to a flat scale."""


EXIT_CODES = {
    "invalid_input": 2,
    "not_found": 3,
    "conflict": 4,
    "infeasible": 5,
    "internal": 1,
}


def to_api_error(exc: Exception) -> dict:
    """Normalize any exception into the error envelope used by CLI and HTTP."""
    if isinstance(exc, MixboError):
        return exc.to_payload()
    return {"code": "internal", "message": f"{type(exc).__name__}: {exc}"}
