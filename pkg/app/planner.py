import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from app.config import DEFAULT_SPRINGBACK_RATIO, Settings
from app.errors import PlanningError, ScrewOutOfBoundsError, SolverError
from app.fem import DEFAULT_LOAD_N, DEFAULT_TOL, FeResult, assemble_and_solve, build_model, cancellous_extrema
from app.models import (
    BiomechanicalReport,
    CandidateSpace,
    FeasibilityFlags,
    NamedTrajectory,
    PlanResult,
    RankedCandidate,
    SolverSummary,
)
from app.trajectory import ScrewSpec, Trajectory, swept_screw_voxels
from app.volume import DensityVolume, MaterialClass, MaterialField, build_material_field, classify_array

logger = logging.getLogger(__name__)

DEFAULT_ROBOT_MAX_CURVATURE = 0.03
CURVATURE_SLACK = 1e-12


@dataclass(frozen=True)
class PlanOptions:
    load_n: float | None = None
    tol: float = DEFAULT_TOL
    max_iter: int | None = None
    threads: int = 1
    robot_max_curvature_per_mm: float = DEFAULT_ROBOT_MAX_CURVATURE
    springback_ratio: float = DEFAULT_SPRINGBACK_RATIO
    rigid_screw: bool = True

    @classmethod
    def from_settings(cls, settings: Settings, load_n: float | None = None) -> "PlanOptions":
        return cls(
            load_n=load_n,
            tol=settings.solver_tol,
            max_iter=settings.solver_max_iter or None,
            threads=settings.threads,
            robot_max_curvature_per_mm=settings.robot_max_curvature_per_mm,
            springback_ratio=settings.springback_ratio,
        )


@dataclass(frozen=True, eq=False)
class CandidateEvaluation:
    candidate_id: str
    trajectory: Trajectory
    report: BiomechanicalReport
    material: MaterialField | None = None
    result: FeResult | None = None


class PlanOutcome(NamedTuple):
    result: PlanResult
    evaluations: dict[str, CandidateEvaluation]


def expand_candidates(space: CandidateSpace) -> list[NamedTrajectory]:
    """Explicit candidates as given, otherwise the curvature x straight-length x roll grid.

    A straight path has no bend plane, so roll variants of curvature 0 collapse
    to one candidate per straight length.
    """
    if space.candidates:
        return list(space.candidates)
    expanded: list[NamedTrajectory] = []
    for curvature in space.curvatures_per_mm:
        rolls = space.roll_angles_deg[:1] if curvature == 0 else space.roll_angles_deg
        for straight in space.straight_lengths_mm:
            for roll in rolls:
                trajectory = Trajectory(
                    entry_mm=space.entry_mm,
                    direction=space.direction,
                    bend_plane_normal=space.bend_plane_normal,
                    straight_length_mm=min(straight, space.screw.length_mm),
                    curvature_per_mm=curvature,
                    total_length_mm=space.screw.length_mm,
                ).with_roll(roll)
                expanded.append(
                    NamedTrajectory(
                        candidate_id=f"k{curvature:.6f}-s{straight:g}-r{roll:g}",
                        trajectory=trajectory,
                    )
                )
    return expanded


def required_set_curvature(curvature_per_mm: float, springback_ratio: float) -> float:
    """Heat-set curvature whose spring-back lands on ``curvature_per_mm``."""
    return curvature_per_mm / (1.0 - springback_ratio)


def _feasibility(
    traj: Trajectory,
    vol: DensityVolume,
    robot_max_curvature: float,
    springback_ratio: float,
    screw: ScrewSpec,
) -> tuple[FeasibilityFlags, np.ndarray | None]:
    reasons: list[str] = []
    voxels: np.ndarray | None = None
    in_bone = True
    try:
        voxels = swept_screw_voxels(traj, screw, vol)
    except ScrewOutOfBoundsError as exc:
        in_bone = False
        reasons.append(f"screw leaves the volume at {len(exc.escaping)} voxel(s)")
    else:
        classes = classify_array(vol.hu[tuple(voxels.T)])
        void_count = int(np.count_nonzero(classes == MaterialClass.VOID))
        if void_count:
            in_bone = False
            reasons.append(f"screw crosses void at {void_count} voxel(s)")

    required = required_set_curvature(traj.curvature_per_mm, springback_ratio)
    achievable = required <= robot_max_curvature + CURVATURE_SLACK
    if not achievable:
        reasons.append(
            f"required set curvature {required:.6f} 1/mm exceeds robot limit {robot_max_curvature:.6f} 1/mm"
        )
    flags = FeasibilityFlags(
        in_bone=in_bone,
        curvature_achievable=achievable,
        required_set_curvature_per_mm=required,
        reasons=reasons,
    )
    return flags, voxels


def feasibility_check(
    traj: Trajectory,
    vol: DensityVolume,
    robot_max_curvature: float = DEFAULT_ROBOT_MAX_CURVATURE,
    springback_ratio: float = DEFAULT_SPRINGBACK_RATIO,
    screw: ScrewSpec | None = None,
) -> FeasibilityFlags:
    flags, _ = _feasibility(traj, vol, robot_max_curvature, springback_ratio, screw or ScrewSpec())
    return flags


def run_candidate(
    vol: DensityVolume,
    traj: Trajectory,
    screw: ScrewSpec,
    candidate_id: str = "candidate",
    options: PlanOptions | None = None,
) -> CandidateEvaluation:
    options = options or PlanOptions()
    flags, voxels = _feasibility(
        traj, vol, options.robot_max_curvature_per_mm, options.springback_ratio, screw
    )
    if not flags.in_bone:
        logger.warning("candidate_out_of_bone candidate_id=%s reasons=%s", candidate_id, flags.reasons)
        report = BiomechanicalReport(
            trajectory_id=candidate_id, curvature_per_mm=traj.curvature_per_mm, feasibility=flags
        )
        return CandidateEvaluation(candidate_id=candidate_id, trajectory=traj, report=report)

    material = build_material_field(vol, voxels)
    model = build_model(
        material,
        traj,
        screw,
        load_n=DEFAULT_LOAD_N if options.load_n is None else options.load_n,
        rigid_screw=options.rigid_screw,
    )
    try:
        result = assemble_and_solve(model, tol=options.tol, max_iter=options.max_iter)
    except SolverError as exc:
        raise SolverError(f"candidate {candidate_id}: {exc}", stats=exc.stats) from exc
    extrema = cancellous_extrema(result, material)
    report = BiomechanicalReport(
        trajectory_id=candidate_id,
        curvature_per_mm=traj.curvature_per_mm,
        max_von_mises_mpa=extrema.max_von_mises_mpa,
        max_principal_strain=extrema.max_principal_strain,
        feasibility=flags,
        solver=SolverSummary(
            iterations=result.stats.iterations,
            relative_residual=result.stats.relative_residual,
            dof_count=result.stats.dof_count,
        ),
    )
    logger.info(
        "candidate_evaluated candidate_id=%s curvature_per_mm=%.6f max_von_mises_mpa=%.4f "
        "max_principal_strain=%.4e feasible=%s",
        candidate_id,
        traj.curvature_per_mm,
        extrema.max_von_mises_mpa,
        extrema.max_principal_strain,
        report.feasible,
    )
    return CandidateEvaluation(
        candidate_id=candidate_id, trajectory=traj, report=report, material=material, result=result
    )


def evaluate_candidate(
    vol: DensityVolume,
    traj: Trajectory,
    screw: ScrewSpec,
    candidate_id: str = "candidate",
    options: PlanOptions | None = None,
) -> BiomechanicalReport:
    """Feasibility flags plus FE cancellous extrema for one trajectory."""
    return run_candidate(vol, traj, screw, candidate_id, options).report


def _ranking_key(index: int, report: BiomechanicalReport) -> tuple[float, float, float, int]:
    return (report.max_von_mises_mpa, report.max_principal_strain, report.curvature_per_mm, index)


def _dominance_note(upper: BiomechanicalReport, lower: BiomechanicalReport) -> str:
    prefix = f"{upper.trajectory_id} ranks above {lower.trajectory_id}"
    if upper.max_von_mises_mpa != lower.max_von_mises_mpa:
        return (
            f"{prefix} on max cancellous von Mises stress "
            f"({upper.max_von_mises_mpa:.4f} < {lower.max_von_mises_mpa:.4f} MPa)"
        )
    if upper.max_principal_strain != lower.max_principal_strain:
        return (
            f"{prefix} on max principal strain, stress tied "
            f"({upper.max_principal_strain:.4e} < {lower.max_principal_strain:.4e})"
        )
    if upper.curvature_per_mm != lower.curvature_per_mm:
        return (
            f"{prefix} on curvature, stress and strain tied "
            f"({upper.curvature_per_mm:.6f} < {lower.curvature_per_mm:.6f} 1/mm)"
        )
    return f"{prefix} on insertion order, stress, strain and curvature tied"


def rank_evaluations(evaluations: list[CandidateEvaluation]) -> PlanResult:
    """Order feasible candidates by (stress, strain, curvature, insertion order)."""
    feasible = [(index, item) for index, item in enumerate(evaluations) if item.report.feasible]
    rejected = {
        item.candidate_id: list(item.report.feasibility.reasons) or ["no finite extrema"]
        for item in evaluations
        if not item.report.feasible
    }
    if not feasible:
        raise PlanningError(f"all {len(evaluations)} candidate(s) are infeasible", reasons=rejected)

    feasible.sort(key=lambda pair: _ranking_key(pair[0], pair[1].report))
    ranked = [
        RankedCandidate(rank=rank, trajectory=item.trajectory, report=item.report)
        for rank, (_, item) in enumerate(feasible, start=1)
    ]
    notes = [
        _dominance_note(upper.report, lower.report) for upper, lower in zip(ranked, ranked[1:])
    ]
    notes.extend(f"{candidate_id} excluded: {'; '.join(reasons)}" for candidate_id, reasons in rejected.items())
    return PlanResult(
        ranked=ranked,
        winner=ranked[0].report.trajectory_id,
        dominance_notes=notes,
        rejected=rejected,
    )


def run_plan(vol: DensityVolume, space: CandidateSpace, options: PlanOptions | None = None) -> PlanOutcome:
    """Exhaustive candidate evaluation; evaluations may run on ``options.threads`` workers."""
    options = options or PlanOptions()
    if options.load_n is None:
        options = replace(options, load_n=space.load_n)
    candidates = expand_candidates(space)
    logger.info("plan_started candidates=%d threads=%d", len(candidates), options.threads)

    def evaluate(candidate: NamedTrajectory) -> CandidateEvaluation:
        return run_candidate(vol, candidate.trajectory, space.screw, candidate.candidate_id, options)

    if options.threads > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            evaluations = list(pool.map(evaluate, candidates))
    else:
        evaluations = [evaluate(candidate) for candidate in candidates]

    result = rank_evaluations(evaluations)
    logger.info("plan_done winner=%s feasible=%d rejected=%d", result.winner, len(result.ranked), len(result.rejected))
    return PlanOutcome(result=result, evaluations={item.candidate_id: item for item in evaluations})


def plan(vol: DensityVolume, space: CandidateSpace, options: PlanOptions | None = None) -> PlanResult:
    return run_plan(vol, space, options).result
