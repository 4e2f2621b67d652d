from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.trajectory import ScrewSpec, Trajectory, Vector3

CORTICAL_THRESHOLD_HU = 1800.0
SEGMENTATION_THRESHOLD_HU = 100.0


def _all_positive(value: tuple[float, ...]) -> tuple[float, ...]:
    if any(component <= 0 for component in value):
        raise ValueError("all components must be > 0")
    return value


class LowBmdEllipsoid(BaseModel):
    center_mm: Vector3
    radii_mm: Vector3
    hu: float = Field(ge=SEGMENTATION_THRESHOLD_HU, lt=CORTICAL_THRESHOLD_HU)

    @field_validator("radii_mm")
    @classmethod
    def radii_positive(cls, value: Vector3) -> Vector3:
        return _all_positive(value)


class PhantomSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    outer_mm: Vector3
    spacing_mm: Vector3 = (1.0, 1.0, 1.0)
    origin_mm: Vector3 = (0.0, 0.0, 0.0)
    shell_mm: float = Field(ge=0)
    cancellous_hu: float = Field(ge=SEGMENTATION_THRESHOLD_HU, lt=CORTICAL_THRESHOLD_HU)
    cortical_hu: float = Field(ge=CORTICAL_THRESHOLD_HU)
    ellipsoid: LowBmdEllipsoid | None = None
    # Further weak regions, painted after `ellipsoid` in list order.
    extra_ellipsoids: tuple[LowBmdEllipsoid, ...] = ()
    seed: int = 0
    noise_hu: float = Field(default=0.0, ge=0)
    margin_mm: float = Field(default=0.0, ge=0)
    void_hu: float = Field(default=-1000.0, lt=SEGMENTATION_THRESHOLD_HU)

    @field_validator("outer_mm", "spacing_mm")
    @classmethod
    def extents_positive(cls, value: Vector3) -> Vector3:
        return _all_positive(value)


class VolumeSidecar(BaseModel):
    dims: tuple[int, int, int]
    spacing_mm: Vector3
    origin_mm: Vector3 = (0.0, 0.0, 0.0)

    @field_validator("dims")
    @classmethod
    def dims_positive(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(component < 1 for component in value):
            raise ValueError("all dims must be >= 1")
        return value

    @field_validator("spacing_mm")
    @classmethod
    def spacing_positive(cls, value: Vector3) -> Vector3:
        return _all_positive(value)


class NamedTrajectory(BaseModel):
    candidate_id: str = Field(min_length=1)
    trajectory: Trajectory


class CandidateSpace(BaseModel):
    entry_mm: Vector3 = (0.0, 0.0, 0.0)
    direction: Vector3 = (1.0, 0.0, 0.0)
    bend_plane_normal: Vector3 = (0.0, 0.0, 1.0)
    curvatures_per_mm: list[float] = Field(default_factory=lambda: [0.0, 1 / 69.5, 1 / 35.0])
    straight_lengths_mm: list[float] = Field(default_factory=lambda: [25.0])
    roll_angles_deg: list[float] = Field(default_factory=lambda: [0.0])
    candidates: list[NamedTrajectory] = Field(default_factory=list)
    screw: ScrewSpec = Field(default_factory=ScrewSpec)
    load_n: float = Field(default=400.0, ge=0)

    @field_validator("curvatures_per_mm")
    @classmethod
    def curvatures_non_negative(cls, value: list[float]) -> list[float]:
        if any(curvature < 0 for curvature in value):
            raise ValueError("curvatures must be >= 0")
        return value

    @field_validator("straight_lengths_mm")
    @classmethod
    def straight_lengths_non_negative(cls, value: list[float]) -> list[float]:
        if any(length < 0 for length in value):
            raise ValueError("straight lengths must be >= 0")
        return value

    @model_validator(mode="after")
    def non_empty(self) -> "CandidateSpace":
        if self.candidates:
            ids = [candidate.candidate_id for candidate in self.candidates]
            if len(ids) != len(set(ids)):
                raise ValueError("candidates.candidate_id values must be unique")
            return self
        if not (self.curvatures_per_mm and self.straight_lengths_mm and self.roll_angles_deg):
            raise ValueError("curvature, straight-length and roll grids must be non-empty")
        return self


class FeasibilityFlags(BaseModel):
    in_bone: bool
    curvature_achievable: bool
    required_set_curvature_per_mm: float
    reasons: list[str] = Field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.in_bone and self.curvature_achievable


class SolverSummary(BaseModel):
    iterations: int
    relative_residual: float
    dof_count: int


class BiomechanicalReport(BaseModel):
    trajectory_id: str
    curvature_per_mm: float
    max_von_mises_mpa: float | None = Field(default=None, ge=0)
    max_principal_strain: float | None = Field(default=None, ge=0)
    feasibility: FeasibilityFlags
    solver: SolverSummary | None = None

    @property
    def feasible(self) -> bool:
        return self.feasibility.feasible and self.max_von_mises_mpa is not None


class RankedCandidate(BaseModel):
    rank: int
    trajectory: Trajectory
    report: BiomechanicalReport


class PlanResult(BaseModel):
    ranked: list[RankedCandidate]
    winner: str
    dominance_notes: list[str]
    rejected: dict[str, list[str]] = Field(default_factory=dict)


class PathErrorReport(BaseModel):
    fitted_radius_mm: float
    fitted_curvature_per_mm: float
    is_straight: bool = False
    radius_error_vs_planned_pct: float = Field(ge=0)
    radius_error_vs_guide_pct: float = Field(ge=0)
    deviation_std_mm: float = Field(ge=0)
    deviation_max_mm: float = Field(ge=0)


class TrialSetting(BaseModel):
    insertion_speed_mm_s: float = Field(gt=0)
    rpm: float = Field(gt=0)


class TrialBatch(BaseModel):
    tip_kind: Literal["oval_head", "ball_nose"] = "oval_head"
    settings: list[TrialSetting] = Field(min_length=1)
    repetitions: int = Field(default=3, ge=1)
    base_seed: int = 0
    noise_std_mm: float = Field(default=0.3, ge=0)
    tracking_error_band: tuple[float, float] = (0.017, 0.022)
    travel_mm: float = Field(default=70.0, gt=0)
    sample_interval_s: float = Field(default=0.02, gt=0)
    springback_ratio: float | None = Field(default=None, ge=0, lt=1)
    outer_length_mm: float = Field(default=80.0, gt=0)
    inner_length_mm: float = Field(default=70.0, gt=0)

    @field_validator("tracking_error_band")
    @classmethod
    def band_ordered(cls, value: tuple[float, float]) -> tuple[float, float]:
        low, high = value
        if not 0 <= low <= high < 1:
            raise ValueError("tracking_error_band must satisfy 0 <= low <= high < 1")
        return value

    def applied_tracking_band(self) -> tuple[float, float] | None:
        """Band the per-trial tracking deviation is drawn from; None when tip noise is off."""
        return self.tracking_error_band if self.noise_std_mm > 0 else None


class BranchSpec(BaseModel):
    roll_deg: float
    insertion_speed_mm_s: float = Field(default=0.85, gt=0)
    travel_mm: float = Field(default=70.0, gt=0)


class BranchBatch(BaseModel):
    tip_kind: Literal["oval_head", "ball_nose"] = "oval_head"
    rpm: float = Field(default=8250.0, gt=0)
    branches: list[BranchSpec] = Field(min_length=2)
    seed: int = 0
    noise_std_mm: float = Field(default=0.3, ge=0)
    sample_interval_s: float = Field(default=0.02, gt=0)
    springback_ratio: float | None = Field(default=None, ge=0, lt=1)


class TrialRow(BaseModel):
    trial_id: str
    tip_kind: str
    insertion_speed_mm_s: float
    rpm: float
    repetition: int
    seed: int
    roll_deg: float
    tracking_error: float
    drilling_time_s: float
    hole_width_mm: float
    fitted_radius_mm: float
    radius_error_vs_planned_pct: float
    radius_error_vs_guide_pct: float
    deviation_std_mm: float
    deviation_max_mm: float


class TrialSummary(BaseModel):
    trial_count: int
    mean_radius_error_vs_guide_pct: float
    min_radius_error_vs_guide_pct: float
    max_radius_error_vs_guide_pct: float
    mean_radius_error_vs_planned_pct: float
    mean_fitted_radius_mm: float
    max_deviation_std_mm: float
    mean_drilling_time_s: float
    # Imposed guide-tracking deviation, in percent of curvature. Not fitted from the trials.
    mean_tracking_error_pct: float = 0.0
    tracking_error_band_pct: tuple[float, float] | None = None


class PlanRequest(BaseModel):
    phantom: PhantomSpec | None = None
    volume_path: str | None = None
    space: CandidateSpace = Field(default_factory=CandidateSpace)

    @model_validator(mode="after")
    def one_volume_source(self) -> "PlanRequest":
        if (self.phantom is None) == (self.volume_path is None):
            raise ValueError("provide exactly one of phantom or volume_path")
        return self


class DrillRequest(BaseModel):
    trajectory: Trajectory
    batch: TrialBatch


class DrillResponse(BaseModel):
    rows: list[TrialRow]
    summary: TrialSummary
