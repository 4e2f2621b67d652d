"""Pipeline steps shared by the CLI and the HTTP routes; each writes its artifacts to ``out_dir``."""

import logging
from dataclasses import dataclass
from pathlib import Path

from pydantic import BaseModel, ValidationError

from app.config import (
    ConfigError,
    load_branch_batch,
    load_candidate_space,
    load_json_model,
    load_phantom_spec,
    load_trajectory,
    load_trial_batch,
)
from app.ctsdr import TrialRun, TubePair, guide_trajectory, run_branch_batch, run_trial_batch
from app.fem import DEFAULT_LOAD_N, FeResult, assemble_and_solve, build_model, cancellous_extrema
from app.metrics import summarize_trials
from app.models import (
    BiomechanicalReport,
    BranchBatch,
    CandidateSpace,
    DrillRequest,
    DrillResponse,
    FeasibilityFlags,
    PlanRequest,
    PlanResult,
    SolverSummary,
    TrialBatch,
    TrialRow,
    TrialSummary,
)
from app.planner import CandidateEvaluation, PlanOptions, PlanOutcome, run_plan
from app.reporting import (
    plot_drill_arcs,
    plot_error_histogram,
    plot_stress_midplane,
    read_csv,
    render_markdown_report,
    write_csv,
    write_json,
)
from app.trajectory import ScrewSpec, Trajectory, swept_screw_voxels
from app.volume import (
    DensityVolume,
    MaterialField,
    build_material_field,
    class_histogram,
    generate_phantom,
    hu_histogram_deciles,
    read_volume,
    write_volume,
)

logger = logging.getLogger(__name__)

PHANTOM_BASENAME = "phantom"
PLAN_RESULT_FILE = "plan_result.json"
CANDIDATES_FILE = "candidates.csv"
WINNER_FILE = "winner_trajectory.json"
TRIALS_FILE = "trials.csv"
DRILL_SUMMARY_FILE = "drill_summary.json"
DRILL_ARCS_FILE = "drill_arcs.svg"
BRANCHES_FILE = "branches.csv"
BRANCH_SUMMARY_FILE = "branch_summary.json"
BRANCH_ARCS_FILE = "branch_arcs.svg"
ERROR_HISTOGRAM_FILE = "error_histogram.svg"
REPORT_FILE = "report.md"

CANDIDATE_COLUMNS = (
    "rank",
    "candidate_id",
    "curvature_per_mm",
    "straight_length_mm",
    "feasible",
    "in_bone",
    "curvature_achievable",
    "required_set_curvature_per_mm",
    "max_von_mises_mpa",
    "max_principal_strain",
    "cg_iterations",
    "relative_residual",
    "reasons",
)


@dataclass(frozen=True)
class PhantomArtifacts:
    raw_path: Path
    sidecar_path: Path
    summary: dict


class DrillSummaryFile(BaseModel):
    summary: TrialSummary


def _safe_name(candidate_id: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in candidate_id)


def _blank(value):
    return "" if value is None else value


def phantom_summary(vol: DensityVolume) -> dict:
    return {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "hu_deciles": hu_histogram_deciles(vol),
        "class_histogram": class_histogram(vol),
    }


def make_phantom(spec_path: Path, out_dir: Path, seed: int | None = None) -> PhantomArtifacts:
    spec = load_phantom_spec(spec_path)
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    vol = generate_phantom(spec)
    raw_path, sidecar_path = write_volume(vol, out_dir / PHANTOM_BASENAME)
    return PhantomArtifacts(raw_path=raw_path, sidecar_path=sidecar_path, summary=phantom_summary(vol))


def _candidate_row(rank: int | None, evaluation: CandidateEvaluation) -> dict:
    report = evaluation.report
    flags = report.feasibility
    return {
        "rank": _blank(rank),
        "candidate_id": evaluation.candidate_id,
        "curvature_per_mm": report.curvature_per_mm,
        "straight_length_mm": evaluation.trajectory.straight_length_mm,
        "feasible": report.feasible,
        "in_bone": flags.in_bone,
        "curvature_achievable": flags.curvature_achievable,
        "required_set_curvature_per_mm": flags.required_set_curvature_per_mm,
        "max_von_mises_mpa": _blank(report.max_von_mises_mpa),
        "max_principal_strain": _blank(report.max_principal_strain),
        "cg_iterations": "" if report.solver is None else report.solver.iterations,
        "relative_residual": "" if report.solver is None else report.solver.relative_residual,
        "reasons": "; ".join(flags.reasons),
    }


def _write_fe_artifacts(out_dir: Path, evaluation: CandidateEvaluation) -> None:
    if evaluation.result is None or evaluation.material is None:
        return
    name = _safe_name(evaluation.candidate_id)
    extrema = cancellous_extrema(evaluation.result, evaluation.material)
    write_json(
        out_dir / f"fe_{name}.json",
        {
            "candidate_id": evaluation.candidate_id,
            "trajectory": evaluation.trajectory,
            "summary": evaluation.result.summary(),
            "cancellous": extrema._asdict(),
        },
    )
    plot_stress_midplane(
        out_dir / f"stress_{name}.svg",
        evaluation.material,
        evaluation.result,
        evaluation.trajectory,
        title=f"{evaluation.candidate_id} von Mises",
    )


def plan_volume(vol: DensityVolume, space: CandidateSpace, out_dir: Path, options: PlanOptions) -> PlanOutcome:
    outcome = run_plan(vol, space, options)
    ranks = {item.report.trajectory_id: item.rank for item in outcome.result.ranked}
    write_json(out_dir / PLAN_RESULT_FILE, outcome.result)
    write_csv(
        out_dir / CANDIDATES_FILE,
        [_candidate_row(ranks.get(candidate_id), item) for candidate_id, item in outcome.evaluations.items()],
        fieldnames=CANDIDATE_COLUMNS,
    )
    write_json(out_dir / WINNER_FILE, outcome.result.ranked[0].trajectory)
    for evaluation in outcome.evaluations.values():
        _write_fe_artifacts(out_dir, evaluation)
    logger.info("plan_artifacts_written out_dir=%s winner=%s", out_dir, outcome.result.winner)
    return outcome


def plan_from_files(volume_path: Path, space_path: Path, out_dir: Path, options: PlanOptions) -> PlanOutcome:
    vol = read_volume(volume_path)
    space = load_candidate_space(space_path)
    return plan_volume(vol, space, out_dir, options)


def _report_without_screening(
    name: str, traj: Trajectory, material: MaterialField, result: FeResult
) -> BiomechanicalReport:
    extrema = cancellous_extrema(result, material)
    stats = result.stats
    return BiomechanicalReport(
        trajectory_id=name,
        curvature_per_mm=traj.curvature_per_mm,
        max_von_mises_mpa=extrema.max_von_mises_mpa,
        max_principal_strain=extrema.max_principal_strain,
        feasibility=FeasibilityFlags(
            in_bone=True,
            curvature_achievable=True,
            required_set_curvature_per_mm=traj.curvature_per_mm,
            reasons=["forward solve only, feasibility not screened"],
        ),
        solver=SolverSummary(
            iterations=stats.iterations, relative_residual=stats.relative_residual, dof_count=stats.dof_count
        ),
    )


def fe_from_files(
    volume_path: Path,
    trajectory_path: Path,
    out_dir: Path,
    options: PlanOptions,
    screw: ScrewSpec | None = None,
    name: str = "trajectory",
) -> CandidateEvaluation:
    """Single forward FE solve of one trajectory, without feasibility screening."""
    vol = read_volume(volume_path)
    traj = load_trajectory(trajectory_path)
    screw = screw or ScrewSpec()
    material = build_material_field(vol, swept_screw_voxels(traj, screw, vol))
    model = build_model(
        material,
        traj,
        screw,
        load_n=DEFAULT_LOAD_N if options.load_n is None else options.load_n,
        rigid_screw=options.rigid_screw,
    )
    result = assemble_and_solve(model, tol=options.tol, max_iter=options.max_iter)
    evaluation = CandidateEvaluation(
        candidate_id=name,
        trajectory=traj,
        report=_report_without_screening(name, traj, material, result),
        material=material,
        result=result,
    )
    _write_fe_artifacts(out_dir, evaluation)
    return evaluation


def drill_batch(
    planned: Trajectory, batch: TrialBatch, out_dir: Path, springback_ratio: float
) -> tuple[TrialRun, TrialSummary]:
    run = run_trial_batch(planned, batch, springback_ratio)
    summary = summarize_trials(run.rows, batch.applied_tracking_band())
    write_csv(out_dir / TRIALS_FILE, run.rows, fieldnames=list(TrialRow.model_fields))
    write_json(out_dir / DRILL_SUMMARY_FILE, {"batch": batch, "summary": summary})
    ratio = batch.springback_ratio if batch.springback_ratio is not None else springback_ratio
    tubes = TubePair.from_trajectory(
        planned, ratio, outer_length_mm=batch.outer_length_mm, inner_length_mm=batch.inner_length_mm
    )
    plot_drill_arcs(
        out_dir / DRILL_ARCS_FILE,
        [result.points for result in run.results],
        [guide_trajectory(tubes)],
        title=f"{len(run.rows)} {batch.tip_kind} trials",
    )
    logger.info(
        "drill_artifacts_written out_dir=%s trials=%d mean_error_vs_guide_pct=%.3f",
        out_dir,
        summary.trial_count,
        summary.mean_radius_error_vs_guide_pct,
    )
    return run, summary


def drill_from_files(
    trajectory_path: Path, batch_path: Path, out_dir: Path, springback_ratio: float, seed: int | None = None
) -> tuple[TrialRun, TrialSummary]:
    planned = load_trajectory(trajectory_path)
    batch = load_trial_batch(batch_path)
    if seed is not None:
        batch = batch.model_copy(update={"base_seed": seed})
    return drill_batch(planned, batch, out_dir, springback_ratio)


def branch_from_files(
    trajectory_path: Path, batch_path: Path, out_dir: Path, springback_ratio: float, seed: int | None = None
) -> tuple[TrialRun, TrialSummary]:
    planned = load_trajectory(trajectory_path)
    batch: BranchBatch = load_branch_batch(batch_path)
    if seed is not None:
        batch = batch.model_copy(update={"seed": seed})
    run = run_branch_batch(planned, batch, springback_ratio)
    summary = summarize_trials(run.rows)
    write_csv(out_dir / BRANCHES_FILE, run.rows, fieldnames=list(TrialRow.model_fields))
    write_json(out_dir / BRANCH_SUMMARY_FILE, {"batch": batch, "summary": summary})
    ratio = batch.springback_ratio if batch.springback_ratio is not None else springback_ratio
    tubes = TubePair.from_trajectory(planned, ratio)
    plot_drill_arcs(
        out_dir / BRANCH_ARCS_FILE,
        [result.points for result in run.results],
        [guide_trajectory(tubes, result.roll_deg) for result in run.results],
        title=f"{len(run.rows)} branches",
    )
    return run, summary


def _load_trial_rows(path: Path) -> list[TrialRow]:
    try:
        return [TrialRow.model_validate(record) for record in read_csv(path)]
    except ValidationError as exc:
        raise ConfigError(f"Invalid trial row in {path}: {exc}") from exc


def build_report(results_dir: Path) -> Path:
    """Markdown report over whatever plan and drill artifacts ``results_dir`` holds."""
    plan_path = results_dir / PLAN_RESULT_FILE
    trials_path = results_dir / TRIALS_FILE
    summary_path = results_dir / DRILL_SUMMARY_FILE
    if not results_dir.is_dir():
        raise ConfigError(f"Results directory does not exist: {results_dir}")
    if not plan_path.exists() and not trials_path.exists():
        raise ConfigError(f"No {PLAN_RESULT_FILE} or {TRIALS_FILE} in {results_dir}")

    plan = load_json_model(plan_path, PlanResult) if plan_path.exists() else None
    rows = _load_trial_rows(trials_path) if trials_path.exists() else None
    summary = None
    if rows:
        summary = load_json_model(summary_path, DrillSummaryFile).summary if summary_path.exists() else summarize_trials(rows)

    figures: list[str] = []
    if plan is not None:
        figures += [
            f"stress_{_safe_name(item.report.trajectory_id)}.svg"
            for item in plan.ranked
            if (results_dir / f"stress_{_safe_name(item.report.trajectory_id)}.svg").exists()
        ]
    if rows:
        plot_error_histogram(
            results_dir / ERROR_HISTOGRAM_FILE,
            [row.radius_error_vs_guide_pct for row in rows],
            title="Fitted radius error vs guide",
        )
        figures.append(ERROR_HISTOGRAM_FILE)
        if (results_dir / DRILL_ARCS_FILE).exists():
            figures.append(DRILL_ARCS_FILE)

    report_path = results_dir / REPORT_FILE
    report_path.write_text(render_markdown_report(plan, rows, summary, figures), encoding="utf-8")
    logger.info("report_written path=%s figures=%d", report_path, len(figures))
    return report_path


def plan_for_request(request: PlanRequest, options: PlanOptions) -> PlanResult:
    vol = generate_phantom(request.phantom) if request.phantom is not None else read_volume(request.volume_path)
    return run_plan(vol, request.space, options).result


def drill_for_request(request: DrillRequest, springback_ratio: float) -> DrillResponse:
    run = run_trial_batch(request.trajectory, request.batch, springback_ratio)
    return DrillResponse(rows=run.rows, summary=summarize_trials(run.rows, request.batch.applied_tracking_band()))
