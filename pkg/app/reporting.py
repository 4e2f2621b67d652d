"""Artifact writers: JSON, CSV, SVG plots and the Markdown report.

Every writer is byte-deterministic for identical inputs: JSON keys are sorted,
floats use ``repr`` and SVGs carry a fixed hash salt and no date.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib.figure import Figure
from pydantic import BaseModel

from app.fem import FeResult
from app.metrics import improvement_percent
from app.models import PlanResult, TrialRow, TrialSummary
from app.trajectory import Trajectory, sample_points
from app.volume import MaterialClass, MaterialField

logger = logging.getLogger(__name__)

STRESS_COLOR_LIMIT_MPA = 10.0
SVG_RC = {"svg.hashsalt": "steerdrill", "svg.fonttype": "path", "path.simplify": False}


def _jsonable(payload: Any) -> Any:
    if isinstance(payload, BaseModel):
        return payload.model_dump(mode="json")
    if isinstance(payload, dict):
        return {str(key): _jsonable(value) for key, value in payload.items()}
    if isinstance(payload, (list, tuple)):
        return [_jsonable(value) for value in payload]
    if isinstance(payload, np.ndarray):
        return payload.tolist()
    if isinstance(payload, np.generic):
        return payload.item()
    return payload


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(path: Path, rows: Sequence[BaseModel | dict], fieldnames: Sequence[str] | None = None) -> Path:
    records = [row.model_dump(mode="json") if isinstance(row, BaseModel) else dict(row) for row in rows]
    if fieldnames is None:
        if not records:
            raise ValueError(f"cannot infer CSV columns for {path} without rows")
        fieldnames = list(records[0])
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open(encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def _save_svg(figure: Figure, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(SVG_RC):
        figure.savefig(path, format="svg", metadata={"Date": None})
    return path


def _slice_axes(traj: Trajectory) -> tuple[int, int, int]:
    """Voxel axis normal to the bend plane, plus the two in-plane axes."""
    normal_axis = int(np.argmax(np.abs(traj.bend_plane_normal)))
    in_plane = [axis for axis in range(3) if axis != normal_axis]
    return normal_axis, in_plane[0], in_plane[1]


def element_field_grid(material: MaterialField, result: FeResult, values: np.ndarray) -> np.ndarray:
    """Scatter per-element values onto the voxel grid; void voxels are NaN."""
    grid = np.full(material.dims, np.nan)
    grid[tuple(result.voxels.T)] = values
    return grid


def plot_stress_midplane(
    path: Path,
    material: MaterialField,
    result: FeResult,
    traj: Trajectory,
    title: str,
    vmax_mpa: float = STRESS_COLOR_LIMIT_MPA,
) -> Path:
    """Von Mises heat map on the voxel slice through the entry point, in the bend plane."""
    normal_axis, first, second = _slice_axes(traj)
    origin = np.asarray(material.origin)
    spacing = np.asarray(material.spacing)
    layer = int(np.clip((traj.entry_mm[normal_axis] - origin[normal_axis]) // spacing[normal_axis], 0, material.dims[normal_axis] - 1))
    stress = np.take(element_field_grid(material, result, result.von_mises), layer, axis=normal_axis)
    screw = np.take(material.material_class == MaterialClass.SCREW, layer, axis=normal_axis)
    extent = (
        origin[first],
        origin[first] + material.dims[first] * spacing[first],
        origin[second],
        origin[second] + material.dims[second] * spacing[second],
    )

    figure = Figure(figsize=(6.0, 4.5))
    axes = figure.add_subplot()
    image = axes.imshow(
        np.ma.masked_where(screw | np.isnan(stress), stress).T,
        origin="lower",
        extent=extent,
        cmap="jet",
        vmin=0.0,
        vmax=vmax_mpa,
        interpolation="nearest",
    )
    centerline = sample_points(traj, np.linspace(0.0, traj.total_length_mm, 111))
    axes.plot(centerline[:, first], centerline[:, second], color="white", linewidth=1.0)
    axes.set_xlabel(f"{'xyz'[first]} (mm)")
    axes.set_ylabel(f"{'xyz'[second]} (mm)")
    axes.set_title(title)
    figure.colorbar(image, ax=axes, label="von Mises stress (MPa)")
    return _save_svg(figure, path)


def plot_drill_arcs(path: Path, paths: Iterable[np.ndarray], guides: Iterable[Trajectory], title: str) -> Path:
    """Realized tip paths over their guide arcs, in the first guide's bend plane."""
    guides = list(guides)
    reference = guides[0]
    origin = np.asarray(reference.entry_mm)
    basis = np.vstack([reference.direction, reference.bend_side])

    figure = Figure(figsize=(6.0, 4.5))
    axes = figure.add_subplot()
    for index, points in enumerate(paths):
        local = (np.asarray(points) - origin) @ basis.T
        axes.plot(local[:, 0], local[:, 1], linewidth=0.6, alpha=0.6, label="realized" if index == 0 else None)
    for index, guide in enumerate(guides):
        arc = (sample_points(guide, np.linspace(0.0, guide.total_length_mm, 141)) - origin) @ basis.T
        axes.plot(arc[:, 0], arc[:, 1], color="black", linestyle="--", linewidth=1.0, label="guide" if index == 0 else None)
    axes.set_aspect("equal")
    axes.set_xlabel("along outer tube (mm)")
    axes.set_ylabel("toward bend (mm)")
    axes.set_title(title)
    axes.legend(loc="upper left")
    return _save_svg(figure, path)


def plot_error_histogram(path: Path, guide_errors_pct: Sequence[float], title: str) -> Path:
    figure = Figure(figsize=(6.0, 4.0))
    axes = figure.add_subplot()
    axes.hist(np.asarray(guide_errors_pct, dtype=float), bins=np.linspace(0.0, 4.0, 33), color="tab:blue", edgecolor="black")
    axes.axvspan(1.7, 2.2, color="tab:orange", alpha=0.2, label="1.7-2.2 %")
    axes.set_xlabel("radius error vs guide (%)")
    axes.set_ylabel("trials")
    axes.set_title(title)
    axes.legend()
    return _save_svg(figure, path)


def improvement_rows(plan: PlanResult) -> list[dict[str, Any]]:
    """Stress and strain improvement of every curved candidate over the straight baseline."""
    baseline = next((item.report for item in plan.ranked if item.report.curvature_per_mm == 0), None)
    if baseline is None:
        return []
    rows = []
    for item in plan.ranked:
        report = item.report
        if report.curvature_per_mm == 0:
            continue
        rows.append(
            {
                "candidate_id": report.trajectory_id,
                "curvature_per_mm": report.curvature_per_mm,
                "stress_improvement_pct": improvement_percent(baseline.max_von_mises_mpa, report.max_von_mises_mpa),
                "strain_improvement_pct": improvement_percent(
                    baseline.max_principal_strain, report.max_principal_strain
                ),
                "baseline_id": baseline.trajectory_id,
            }
        )
    return rows


def _tracking_line(summary: TrialSummary) -> str:
    if summary.tracking_error_band_pct is None:
        return "- imposed tracking deviation: none (tip noise only)"
    low, high = summary.tracking_error_band_pct
    return (
        f"- imposed tracking deviation: band {low:.2f}-{high:.2f} %, mean {summary.mean_tracking_error_pct:.2f} % "
        "(model input, not a fitted result)"
    )


def render_markdown_report(
    plan: PlanResult | None,
    trial_rows: Sequence[TrialRow] | None,
    trial_summary: TrialSummary | None,
    figures: Sequence[str],
) -> str:
    lines = ["# Steerable drilling plan report", ""]
    if plan is not None:
        lines += [
            "## Candidate ranking",
            "",
            f"Winner: `{plan.winner}`",
            "",
            "| rank | candidate | curvature (1/mm) | max von Mises (MPa) | max principal strain | CG iterations |",
            "|---:|---|---:|---:|---:|---:|",
        ]
        for item in plan.ranked:
            report = item.report
            iterations = report.solver.iterations if report.solver else 0
            lines.append(
                f"| {item.rank} | {report.trajectory_id} | {report.curvature_per_mm:.6f} | "
                f"{report.max_von_mises_mpa:.4f} | {report.max_principal_strain:.4e} | {iterations} |"
            )
        lines.append("")
        improvements = improvement_rows(plan)
        lines += ["## Improvement over the straight trajectory", ""]
        if improvements:
            lines += [
                "| candidate | curvature (1/mm) | stress improvement (%) | strain improvement (%) |",
                "|---|---:|---:|---:|",
            ]
            lines += [
                f"| {row['candidate_id']} | {row['curvature_per_mm']:.6f} | "
                f"{row['stress_improvement_pct']:.1f} | {row['strain_improvement_pct']:.1f} |"
                for row in improvements
            ]
        else:
            lines.append("No feasible straight baseline among the ranked candidates.")
        lines.append("")
        lines += ["## Dominance notes", ""] + [f"- {note}" for note in plan.dominance_notes] + [""]

    if trial_summary is not None:
        lines += [
            "## Drilling trials",
            "",
            f"- trials: {trial_summary.trial_count}",
            f"- mean fitted radius: {trial_summary.mean_fitted_radius_mm:.2f} mm",
            f"- radius error vs guide: mean {trial_summary.mean_radius_error_vs_guide_pct:.2f} %, "
            f"min {trial_summary.min_radius_error_vs_guide_pct:.2f} %, "
            f"max {trial_summary.max_radius_error_vs_guide_pct:.2f} %",
            f"- mean radius error vs plan: {trial_summary.mean_radius_error_vs_planned_pct:.2f} %",
            f"- largest deviation std: {trial_summary.max_deviation_std_mm:.3f} mm",
            f"- mean drilling time: {trial_summary.mean_drilling_time_s:.1f} s",
            _tracking_line(trial_summary),
            "",
        ]
    if trial_rows:
        lines += [
            "| trial | speed (mm/s) | rpm | fitted radius (mm) | error vs guide (%) | deviation std (mm) |",
            "|---|---:|---:|---:|---:|---:|",
        ]
        lines += [
            f"| {row.trial_id} | {row.insertion_speed_mm_s:g} | {row.rpm:g} | {row.fitted_radius_mm:.2f} | "
            f"{row.radius_error_vs_guide_pct:.2f} | {row.deviation_std_mm:.3f} |"
            for row in trial_rows
        ]
        lines.append("")
    if figures:
        lines += ["## Figures", ""] + [f"![{name}]({name})" for name in figures] + [""]
    return "\n".join(lines)
