"""Exception types shared across the package.

The CLI maps these onto process exit codes, so each class carries one.
"""

from __future__ import annotations


class AttenMfgError(Exception):
    exit_code = 1


class InvalidParametersError(AttenMfgError, ValueError):
    """Numerical parameters produced a non-finite or out-of-domain value."""

    exit_code = 2


class InstanceParseError(AttenMfgError, ValueError):
    """Serialized instance does not follow the schema."""

    exit_code = 2

    def __init__(self, field: str, message: str | None = None) -> None:
        self.field = field
        super().__init__(message or f"missing or malformed field {field!r}")


class InstanceValidationError(AttenMfgError, ValueError):
    exit_code = 2


class InfeasibleConfigError(AttenMfgError, ValueError):
    """More machines than maintenance slots (M > T*J)."""

    exit_code = 3


class InfeasibleScheduleError(AttenMfgError, ValueError):
    exit_code = 3


class BudgetExceededError(AttenMfgError, RuntimeError):
    exit_code = 4


class NonFiniteGradientError(AttenMfgError, FloatingPointError):
    exit_code = 2

    def __init__(self, name: str) -> None:
        self.name = name
        super().__init__(f"non-finite gradient in parameter {name!r}")
