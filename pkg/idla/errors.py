from __future__ import annotations

from typing import Any, List, Optional


class IdlaError(RuntimeError):
    pass


class DomainError(IdlaError, ValueError):
    pass


class CapacityError(IdlaError):
    pass


class NumericError(IdlaError):
    pass


class InsufficientResolution(IdlaError):
    """
    Monte Carlo frequencies were all 0 or all 1, so no decay can be fitted.
    The message says which knob to turn (replicas, grid, radius).
    """


class StepBudgetExceeded(IdlaError):
    """
    A walk ran past its step budget. Exit of a finite set is a.s. finite,
    so this means a bug or an absurd budget; the partial state is kept.
    """

    def __init__(self, message: str, state: Any = None, budget: int = 0, start: Any = None):
        super().__init__(message)
        self.state = state
        self.budget = budget
        self.start = start


class ConfigError(IdlaError):
    def __init__(self, message: str, diagnostics: Optional[List[str]] = None):
        self.diagnostics = list(diagnostics or [])
        if self.diagnostics:
            message = message + "\n" + "\n".join(f"  - {d}" for d in self.diagnostics)
        super().__init__(message)


class SchemaError(IdlaError):
    def __init__(self, message: str, expected: Optional[List[str]] = None, found: Optional[List[str]] = None):
        self.expected = list(expected or [])
        self.found = list(found or [])
        if expected is not None:
            missing = [c for c in self.expected if c not in self.found]
            message = f"{message} (expected columns: {','.join(self.expected)}; missing: {','.join(missing) or '-'})"
        super().__init__(message)
