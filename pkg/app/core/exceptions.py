"""
Domain Errors
Every failure the lab can report, with its CLI exit code.

The CLI's global handler (app.main) turns any OseenLabError into a JSON
error document and returns ``exit_code``.
"""

from typing import Any, Dict, Optional


class OseenLabError(Exception):
    """Base class for reported failures."""

    exit_code: int = 3
    error_type: str = "internal_error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": {
                "type": self.error_type,
                "message": self.message,
                "details": self.details,
            }
        }


# ============================================================================
# USAGE / CONFIG (exit 2)
# ============================================================================

class ConfigError(OseenLabError):
    """Unreadable config, unknown key, bad value or bad override."""

    exit_code = 2
    error_type = "config_error"


class InvalidInputError(OseenLabError, ValueError):
    """A precondition of a library operation is violated."""

    exit_code = 2
    error_type = "invalid_input"


# ============================================================================
# NUMERICAL FAILURES (exit 3)
# ============================================================================

class UnsupportedEvaluationError(OseenLabError):
    """Evaluation requested where the quadrature is not valid."""

    error_type = "unsupported_evaluation"


class QuadratureError(OseenLabError):
    """Tolerance unreachable within the configured budget."""

    error_type = "quadrature_error"

    def __init__(self, message: str, achieved: float, tolerance: float, **details):
        super().__init__(message, {"achieved": achieved, "tolerance": tolerance, **details})
        self.achieved = achieved
        self.tolerance = tolerance


class MeshValidationError(OseenLabError):
    """A mesh invariant is broken; ``element_ids`` names the offenders."""

    error_type = "mesh_invalid"

    def __init__(self, message: str, element_ids=None, **details):
        ids = [int(i) for i in (element_ids if element_ids is not None else [])]
        super().__init__(message, {"element_ids": ids[:50], "count": len(ids), **details})
        self.element_ids = ids


class SolverError(OseenLabError):
    """Factorization, Krylov or eigensolver failure."""

    error_type = "solver_error"


# ============================================================================
# STUDY OUTCOME (exit 1)
# ============================================================================

class StudyFailure(OseenLabError):
    """Acceptance criteria not met."""

    exit_code = 1
    error_type = "study_failed"
