from typing import Any, Optional


class FeasPathError(Exception):
    exit_code = 1
    # partial path attached by the sequential driver when a run aborts
    path: Any = None


class CaseParseError(FeasPathError):
    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CaseValidationError(FeasPathError):
    exit_code = 2


class UnsupportedCostError(FeasPathError):
    exit_code = 2


class ConfigurationError(FeasPathError):
    exit_code = 2


class PowerFlowDivergedError(FeasPathError):
    exit_code = 3

    def __init__(self, message: str, iterations: int = 0, mismatch: float = float("nan")) -> None:
        self.iterations = iterations
        self.mismatch = mismatch
        super().__init__(message)


class SingularJacobianError(FeasPathError):
    exit_code = 3


class InfeasibleStartError(FeasPathError):
    exit_code = 3

    def __init__(self, message: str, report: Any = None) -> None:
        self.report = report
        super().__init__(message)


class SolverFailureError(FeasPathError):
    exit_code = 4

    def __init__(self, message: str, result: Any = None) -> None:
        self.result = result
        super().__init__(message)


class CertificationError(FeasPathError):
    exit_code = 5

    def __init__(self, message: str, segment: int = -1, alpha: float = float("nan"), constraint: str = "") -> None:
        self.segment = segment
        self.alpha = alpha
        self.constraint = constraint
        super().__init__(message)
