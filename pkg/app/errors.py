from dataclasses import dataclass

import numpy as np


class SteerDrillError(RuntimeError):
    pass


class DomainError(SteerDrillError, ValueError):
    pass


class UsageError(SteerDrillError, ValueError):
    pass


class SpecError(SteerDrillError, ValueError):
    pass


class ModelError(SteerDrillError):
    pass


@dataclass(frozen=True)
class SolverStats:
    iterations: int
    relative_residual: float
    dof_count: int
    converged: bool

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "relative_residual": self.relative_residual,
            "dof_count": self.dof_count,
            "converged": self.converged,
        }


class SolverError(SteerDrillError):
    def __init__(self, message: str, stats: SolverStats | None = None) -> None:
        super().__init__(message)
        self.stats = stats


class DisconnectedMeshError(SolverError):
    def __init__(self, message: str, component_label: int, element_count: int) -> None:
        super().__init__(message)
        self.component_label = component_label
        self.element_count = element_count


class PlanningError(SteerDrillError):
    def __init__(self, message: str, reasons: dict[str, list[str]]) -> None:
        super().__init__(message)
        self.reasons = reasons


class ScrewOutOfBoundsError(SteerDrillError, IndexError):
    """The swept screw leaves the grid; ``escaping`` holds the offending (i, j, k) indices."""

    def __init__(self, message: str, escaping: np.ndarray) -> None:
        super().__init__(message)
        self.escaping = escaping
