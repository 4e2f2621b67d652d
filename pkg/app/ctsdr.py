"""Concentric-tube steerable drilling robot simulation.

The outer tube is rigid and straight; its mouth sits at ``entry_mm``. The
pre-curved inner tube leaves the mouth tangent to the outer tube axis and
recovers its achieved curvature immediately, so every exposed shape is a
constant-curvature arc.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.errors import DomainError
from app.metrics import evaluate_path
from app.models import BranchBatch, TrialBatch, TrialRow
from app.trajectory import Trajectory, Vector3, orthonormal_frame, point_at, sample_points, sample_tangents

logger = logging.getLogger(__name__)

DEFAULT_RPM = 8250.0
SHAPE_SAMPLE_STEP_MM = 0.5


class TipKind(str, Enum):
    OVAL_HEAD = "oval_head"
    BALL_NOSE = "ball_nose"


class TipPreset(NamedTuple):
    diameter_mm: float
    runout_mm: float


# Runout reproduces the measured hole widths at 8250 rpm (8.3 mm oval, 7.83 mm ball nose).
TIP_PRESETS: dict[TipKind, TipPreset] = {
    TipKind.OVAL_HEAD: TipPreset(diameter_mm=6.35, runout_mm=1.95),
    TipKind.BALL_NOSE: TipPreset(diameter_mm=6.75, runout_mm=1.08),
}


def calibrate_springback(set_curvature_per_mm: float, achieved_curvature_per_mm: float) -> float:
    """Spring-back ratio ``1 - achieved / set`` of a heat-set guide."""
    if not math.isfinite(set_curvature_per_mm) or set_curvature_per_mm <= 0:
        raise DomainError(f"set curvature must be > 0, got {set_curvature_per_mm}")
    if not math.isfinite(achieved_curvature_per_mm) or achieved_curvature_per_mm <= 0:
        raise DomainError(f"achieved curvature must be > 0, got {achieved_curvature_per_mm}")
    if achieved_curvature_per_mm > set_curvature_per_mm:
        raise DomainError(
            f"achieved curvature {achieved_curvature_per_mm} exceeds set curvature "
            f"{set_curvature_per_mm}; spring-back cannot tighten a guide"
        )
    return 1.0 - achieved_curvature_per_mm / set_curvature_per_mm


class TubePair(BaseModel):
    model_config = ConfigDict(frozen=True)

    outer_length_mm: float = Field(default=80.0, gt=0)
    inner_length_mm: float = Field(default=70.0, gt=0)
    set_curvature_per_mm: float = Field(ge=0)
    springback_ratio: float = Field(default=0.0, ge=0, lt=1)
    entry_mm: Vector3 = (0.0, 0.0, 0.0)
    direction: Vector3 = (1.0, 0.0, 0.0)
    bend_plane_normal: Vector3 = (0.0, 0.0, 1.0)

    @model_validator(mode="before")
    @classmethod
    def normalize_frame(cls, data: dict) -> dict:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        direction = data.get("direction", (1.0, 0.0, 0.0))
        normal = data.get("bend_plane_normal", (0.0, 0.0, 1.0))
        data["direction"], data["bend_plane_normal"] = orthonormal_frame(direction, normal)
        return data

    @property
    def achieved_curvature_per_mm(self) -> float:
        return self.set_curvature_per_mm * (1.0 - self.springback_ratio)

    @classmethod
    def from_trajectory(
        cls,
        traj: Trajectory,
        springback_ratio: float,
        compensate: bool = False,
        outer_length_mm: float = 80.0,
        inner_length_mm: float = 70.0,
    ) -> "TubePair":
        """Tubes whose mouth sits at the end of the trajectory's straight segment.

        Without ``compensate`` the guide is heat-set to the planned curvature and
        lands short of it by the spring-back; with it the set curvature is
        raised so the achieved curvature matches the plan.
        """
        set_curvature = traj.curvature_per_mm
        if compensate:
            set_curvature /= 1.0 - springback_ratio
        return cls(
            outer_length_mm=outer_length_mm,
            inner_length_mm=inner_length_mm,
            set_curvature_per_mm=set_curvature,
            springback_ratio=springback_ratio,
            entry_mm=tuple(float(v) for v in point_at(traj, traj.straight_length_mm)),
            direction=traj.direction,
            bend_plane_normal=traj.bend_plane_normal,
        )


def guide_trajectory(
    tubes: TubePair, roll_deg: float = 0.0, curvature_per_mm: float | None = None
) -> Trajectory:
    """The arc the inner tube follows from the mouth, as a zero-straight Trajectory."""
    guide = Trajectory(
        entry_mm=tubes.entry_mm,
        direction=tubes.direction,
        bend_plane_normal=tubes.bend_plane_normal,
        straight_length_mm=0.0,
        curvature_per_mm=tubes.achieved_curvature_per_mm if curvature_per_mm is None else curvature_per_mm,
        total_length_mm=tubes.inner_length_mm,
    )
    return guide.with_roll(roll_deg) if roll_deg else guide


class DrillSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    tip_kind: TipKind = TipKind.OVAL_HEAD
    tip_diameter_mm: float = Field(gt=0)
    rpm: float = Field(default=DEFAULT_RPM, gt=0)
    runout_mm: float = Field(default=0.0, ge=0)

    @classmethod
    def preset(cls, tip_kind: TipKind | str, rpm: float = DEFAULT_RPM) -> "DrillSpec":
        kind = TipKind(tip_kind)
        tip = TIP_PRESETS[kind]
        return cls(tip_kind=kind, tip_diameter_mm=tip.diameter_mm, rpm=rpm, runout_mm=tip.runout_mm)

    @property
    def hole_width_mm(self) -> float:
        # Runout is rpm-independent; cutting dynamics are not modeled.
        return self.tip_diameter_mm + self.runout_mm


class InsertionProfile(BaseModel):
    model_config = ConfigDict(frozen=True)

    insertion_speed_mm_s: float = Field(gt=0)
    travel_mm: float = Field(gt=0)
    sample_interval_s: float = Field(default=0.02, gt=0)

    @property
    def drilling_time_s(self) -> float:
        return self.travel_mm / self.insertion_speed_mm_s


class DeployedShape(NamedTuple):
    points: np.ndarray
    tip: np.ndarray
    tangent: np.ndarray


@dataclass(frozen=True, eq=False)
class DrillSimResult:
    times_s: np.ndarray = field(repr=False)
    points: np.ndarray = field(repr=False)
    achieved_curvature_per_mm: float
    realized_curvature_per_mm: float
    drilling_time_s: float
    hole_width_mm: float
    seed: int
    roll_deg: float = 0.0
    tracking_error: float = 0.0
    insertion_speed_mm_s: float = 0.0

    def __post_init__(self) -> None:
        if len(self.times_s) != len(self.points):
            raise DomainError("times and points must have the same length")
        if np.any(np.diff(self.times_s) <= 0):
            raise DomainError("timestamps must be strictly increasing")
        self.times_s.setflags(write=False)
        self.points.setflags(write=False)


def deploy(tubes: TubePair, insertion_mm: float, roll_deg: float = 0.0) -> DeployedShape:
    """Exposed inner-tube shape after advancing ``insertion_mm`` past the mouth."""
    if not math.isfinite(insertion_mm) or not 0 <= insertion_mm <= tubes.inner_length_mm:
        raise DomainError(f"insertion must be in [0, {tubes.inner_length_mm}] mm, got {insertion_mm}")
    guide = guide_trajectory(tubes, roll_deg)
    if insertion_mm == 0:
        points = np.empty((0, 3))
    else:
        count = int(math.ceil(insertion_mm / SHAPE_SAMPLE_STEP_MM)) + 1
        points = sample_points(guide, np.linspace(0.0, insertion_mm, count))
    tip = point_at(guide, insertion_mm)
    tangent = sample_tangents(guide, np.array([insertion_mm]))[0]
    return DeployedShape(points=points, tip=tip, tangent=tangent)


def _sample_times(drilling_time_s: float, interval_s: float) -> np.ndarray:
    steps = max(1, int(math.ceil(drilling_time_s / interval_s - 1e-9)))
    times = np.arange(steps + 1, dtype=float) * interval_s
    times[-1] = drilling_time_s
    return times


def simulate_drill(
    tubes: TubePair,
    profile: InsertionProfile,
    drill: DrillSpec,
    noise_std_mm: float,
    seed: int,
    roll_deg: float = 0.0,
    tracking_error: float = 0.0,
) -> DrillSimResult:
    """Time-stamped tip positions of one drilling pass.

    ``tracking_error`` scales the realized radius relative to the guide; the
    tip positions then carry isotropic Gaussian noise of ``noise_std_mm``.
    """
    if profile.travel_mm > tubes.inner_length_mm:
        raise DomainError(
            f"travel {profile.travel_mm} mm exceeds inner tube length {tubes.inner_length_mm} mm"
        )
    if not math.isfinite(noise_std_mm) or noise_std_mm < 0:
        raise DomainError(f"noise_std_mm must be >= 0, got {noise_std_mm}")
    if not math.isfinite(tracking_error) or tracking_error <= -1:
        raise DomainError(f"tracking_error must be > -1, got {tracking_error}")

    achieved = tubes.achieved_curvature_per_mm
    realized = achieved / (1.0 + tracking_error)
    path = guide_trajectory(tubes, roll_deg, curvature_per_mm=realized)
    times = _sample_times(profile.drilling_time_s, profile.sample_interval_s)
    insertion = np.minimum(times * profile.insertion_speed_mm_s, profile.travel_mm)
    points = sample_points(path, insertion)
    if noise_std_mm > 0:
        rng = np.random.default_rng(seed)
        points = points + rng.normal(0.0, noise_std_mm, size=points.shape)

    logger.debug(
        "drill_simulated seed=%d roll_deg=%.1f samples=%d tracking_error=%.4f",
        seed,
        roll_deg,
        len(times),
        tracking_error,
    )
    return DrillSimResult(
        times_s=times,
        points=points,
        achieved_curvature_per_mm=achieved,
        realized_curvature_per_mm=realized,
        drilling_time_s=profile.drilling_time_s,
        hole_width_mm=drill.hole_width_mm,
        seed=seed,
        roll_deg=roll_deg,
        tracking_error=tracking_error,
        insertion_speed_mm_s=profile.insertion_speed_mm_s,
    )


def _child_seeds(seed: int, count: int) -> list[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def branch_drill(
    tubes: TubePair,
    profiles: Sequence[tuple[InsertionProfile, float]],
    drill: DrillSpec,
    noise_std_mm: float,
    seed: int,
) -> list[DrillSimResult]:
    """One drilling pass per roll angle, all from the same mouth."""
    if len(profiles) < 2:
        raise DomainError(f"branch drilling needs at least 2 branches, got {len(profiles)}")
    duplicates = sorted(roll for roll, count in Counter(roll for _, roll in profiles).items() if count > 1)
    if duplicates:
        logger.warning("branch_duplicate_roll roll_deg=%s", duplicates)
    results = [
        simulate_drill(tubes, profile, drill, noise_std_mm, branch_seed, roll_deg=roll)
        for (profile, roll), branch_seed in zip(profiles, _child_seeds(seed, len(profiles)))
    ]
    logger.info("branch_drill_done branches=%d seed=%d", len(results), seed)
    return results


class TrialRun(NamedTuple):
    rows: list[TrialRow]
    results: list[DrillSimResult]


def _trial_row(
    trial_id: str,
    result: DrillSimResult,
    tubes: TubePair,
    planned_curvature_per_mm: float,
    tip_kind: TipKind,
    rpm: float,
    repetition: int,
) -> TrialRow:
    report = evaluate_path(result.points, guide_trajectory(tubes, result.roll_deg), planned_curvature_per_mm)
    return TrialRow(
        trial_id=trial_id,
        tip_kind=tip_kind.value,
        insertion_speed_mm_s=result.insertion_speed_mm_s,
        rpm=rpm,
        repetition=repetition,
        seed=result.seed,
        roll_deg=result.roll_deg,
        tracking_error=result.tracking_error,
        drilling_time_s=result.drilling_time_s,
        hole_width_mm=result.hole_width_mm,
        fitted_radius_mm=report.fitted_radius_mm,
        radius_error_vs_planned_pct=report.radius_error_vs_planned_pct,
        radius_error_vs_guide_pct=report.radius_error_vs_guide_pct,
        deviation_std_mm=report.deviation_std_mm,
        deviation_max_mm=report.deviation_max_mm,
    )


def run_trial_batch(planned: Trajectory, batch: TrialBatch, springback_ratio: float) -> TrialRun:
    """Seeded speed x rpm x repetition grid against the guide heat-set to ``planned``.

    With noise enabled each trial also draws an imposed tracking deviation
    from ``batch.tracking_error_band``, a model input rather than something the
    simulation predicts. Set the band to ``(0, 0)`` to keep only the tip noise;
    a noiseless batch follows the guide exactly.
    """
    if planned.curvature_per_mm <= 0:
        raise DomainError("drilling trials need a curved planned trajectory")
    ratio = batch.springback_ratio if batch.springback_ratio is not None else springback_ratio
    tubes = TubePair.from_trajectory(
        planned,
        ratio,
        outer_length_mm=batch.outer_length_mm,
        inner_length_mm=batch.inner_length_mm,
    )
    tip_kind = TipKind(batch.tip_kind)
    band = batch.applied_tracking_band()
    grid = [
        (setting, repetition)
        for setting in batch.settings
        for repetition in range(1, batch.repetitions + 1)
    ]
    rows: list[TrialRow] = []
    results: list[DrillSimResult] = []
    for index, ((setting, repetition), trial_seed) in enumerate(
        zip(grid, _child_seeds(batch.base_seed, len(grid))), start=1
    ):
        tracking = 0.0
        if band is not None:
            tracking = float(np.random.default_rng([trial_seed, 1]).uniform(*band))
        profile = InsertionProfile(
            insertion_speed_mm_s=setting.insertion_speed_mm_s,
            travel_mm=batch.travel_mm,
            sample_interval_s=batch.sample_interval_s,
        )
        drill = DrillSpec.preset(tip_kind, rpm=setting.rpm)
        result = simulate_drill(tubes, profile, drill, batch.noise_std_mm, trial_seed, tracking_error=tracking)
        results.append(result)
        rows.append(
            _trial_row(f"trial-{index:02d}", result, tubes, planned.curvature_per_mm, tip_kind, setting.rpm, repetition)
        )
    logger.info(
        "trial_batch_done trials=%d tip_kind=%s noise_std_mm=%.3f tracking_error_band=%s springback_ratio=%.5f",
        len(rows),
        tip_kind.value,
        batch.noise_std_mm,
        band,
        ratio,
    )
    return TrialRun(rows=rows, results=results)


def run_branch_batch(planned: Trajectory, batch: BranchBatch, springback_ratio: float) -> TrialRun:
    """Branch drilling from the planned trajectory's mouth at every roll in ``batch``."""
    if planned.curvature_per_mm <= 0:
        raise DomainError("branch drilling needs a curved planned trajectory")
    ratio = batch.springback_ratio if batch.springback_ratio is not None else springback_ratio
    tubes = TubePair.from_trajectory(planned, ratio)
    tip_kind = TipKind(batch.tip_kind)
    drill = DrillSpec.preset(tip_kind, rpm=batch.rpm)
    profiles = [
        (
            InsertionProfile(
                insertion_speed_mm_s=branch.insertion_speed_mm_s,
                travel_mm=branch.travel_mm,
                sample_interval_s=batch.sample_interval_s,
            ),
            branch.roll_deg,
        )
        for branch in batch.branches
    ]
    results = branch_drill(tubes, profiles, drill, batch.noise_std_mm, batch.seed)
    rows = [
        _trial_row(f"branch-{index:02d}", result, tubes, planned.curvature_per_mm, tip_kind, batch.rpm, 1)
        for index, result in enumerate(results, start=1)
    ]
    return TrialRun(rows=rows, results=results)
