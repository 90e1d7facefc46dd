"""
Error taxonomy for chainstack.

Every error raised on purpose by the library derives from ChainStackError and
knows how to render itself as the machine-readable record the CLI prints.
"""

from typing import Any, Dict, Optional


class ChainStackError(Exception):
    """Base class for all deliberate chainstack failures."""

    code = "ERROR"
    exit_code = 1

    def __init__(self, message: str, module: str = "chainstack", **details: Any):
        super().__init__(message)
        self.message = message
        self.module = module
        self.details = details

    def to_record(self) -> Dict[str, Any]:
        """
        Render the error as a JSON-ready record.

        Returns:
            Dictionary {"error": {...}} with code, module, message and details
        """
        record = {"code": self.code, "module": self.module, "message": self.message}
        record.update(self.details)
        return {"error": record}


class InputMissing(ChainStackError, FileNotFoundError):
    code = "IO"
    exit_code = 2


class ParseError(ChainStackError, ValueError):
    code = "PARSE"
    exit_code = 2


class TooFewDraws(ChainStackError, ValueError):
    code = "CONTRACT"
    exit_code = 3


class DimensionMismatch(ChainStackError, ValueError):
    code = "DIMENSION"
    exit_code = 3


class DomainError(ChainStackError, ValueError):
    code = "DOMAIN"
    exit_code = 3


class BoundViolation(ChainStackError, ValueError):
    code = "BOUND"
    exit_code = 3


class NumericalFailure(ChainStackError, ArithmeticError):
    code = "NUMERICAL"
    exit_code = 4


class ConvergenceError(ChainStackError, RuntimeError):
    """Optimizer ran out of iterations; `best` holds the best iterate seen."""

    code = "CONVERGENCE"
    exit_code = 5

    def __init__(self, message: str, best: Optional[Any] = None, **details: Any):
        super().__init__(message, **details)
        self.best = best


class SmoothingSkipped(ChainStackError):
    """Internal signal: a tail is too short or degenerate to fit."""

    code = "SMOOTHING_SKIPPED"
