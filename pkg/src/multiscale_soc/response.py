import json
from datetime import datetime, timezone
from enum import Enum, IntEnum
from typing import Any, Dict, Optional


class StageType(str, Enum):
    """Pipeline stages; the value is also the stage's output subdirectory."""

    SCENARIO = "scenario"
    DENSITY = "density"
    HOMOGENIZE = "homogenize"
    CELL = "cell"
    SOLVE_EFFECTIVE = "solve-effective"
    SOLVE_MULTISCALE = "solve-multiscale"
    CONVERGE = "converge"
    SIMULATE = "simulate"
    REPORT = "report"
    CHECK = "check"


class ErrorCode(IntEnum):
    """Error codes; each maps to a process exit code through `exit_code`."""

    INVALID_ARGUMENTS = 2
    NUMERICAL_FAILURE = 3
    ACCEPTANCE_FAILURE = 4
    IO_FAILURE = 5

    @property
    def exit_code(self) -> int:
        # I/O problems surface as numerical-stage failures.
        if self is ErrorCode.IO_FAILURE:
            return int(ErrorCode.NUMERICAL_FAILURE)
        return int(self)


def iso_utc_timestamp() -> str:
    """
    Generate an ISO 8601 UTC timestamp with microsecond precision, suffixed
    with 'Z'.
    Example: '2025-09-10T09:42:13.123456Z'
    """
    return (
        datetime.now(timezone.utc)
        .isoformat(timespec="microseconds")
        .replace("+00:00", "Z")
    )


def make_success_response(stage: StageType, data: Dict[str, Any]) -> Dict[str, Any]:
    """
    Create a SUCCESS envelope.

    {
      "timestamp": "...",
      "status": "SUCCESS",
      "metadata": { "stage": "..." },
      "data": { ... }
    }
    """
    return {
        "timestamp": iso_utc_timestamp(),
        "status": "SUCCESS",
        "metadata": {"stage": StageType(stage).value},
        "data": data,
    }


def make_error_response(stage: StageType, code: int, message: str) -> Dict[str, Any]:
    """
    Create a FAILURE envelope.

    {
      "timestamp": "...",
      "status": "FAILURE",
      "metadata": { "stage": "..." },
      "error": { "code": <int>, "message": "<string>" }
    }
    """
    return {
        "timestamp": iso_utc_timestamp(),
        "status": "FAILURE",
        "metadata": {"stage": StageType(stage).value},
        "error": {
            "code": int(code),
            "message": str(message),
        },
    }


class SocError(Exception):
    """Base error carrying the failing stage and its error code."""

    code = ErrorCode.NUMERICAL_FAILURE

    def __init__(self, message: str, stage: Optional[StageType] = None):
        super().__init__(message)
        self.message = message
        self.stage = stage or StageType.SCENARIO

    @property
    def response(self) -> Dict[str, Any]:
        return make_error_response(self.stage, self.code, self.message)

    def to_json(self) -> str:
        return json.dumps(self.response)


class ScenarioError(SocError, ValueError):
    """Malformed scenario text or a violated configuration invariant."""

    code = ErrorCode.INVALID_ARGUMENTS


class NumericalError(SocError, RuntimeError):
    """Solver non-convergence, singular systems, non-positive densities."""

    code = ErrorCode.NUMERICAL_FAILURE


class DependencyError(SocError):
    """A stage was requested without the outputs of the stages it reads."""

    code = ErrorCode.INVALID_ARGUMENTS


class AcceptanceError(SocError):
    """One or more acceptance checks failed."""

    code = ErrorCode.ACCEPTANCE_FAILURE


class OutputError(SocError):
    """A stage could not read or write its files."""

    code = ErrorCode.IO_FAILURE


def invalid_argument(stage: StageType, message: str) -> ScenarioError:
    """Reject a bad stage argument; the envelope is available as `.response`."""
    return ScenarioError(message, stage=stage)
