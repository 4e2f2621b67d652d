"""Command-line entry point: ``python -m app.cli <command>``.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 no feasible candidate.
"""

import json
import logging
from dataclasses import dataclass, replace
from functools import wraps
from pathlib import Path
from typing import Callable, Optional

import typer
from pydantic import ValidationError

from app.config import ConfigError, Settings, get_settings
from app.errors import DomainError, ModelError, PlanningError, SolverError, SpecError, UsageError
from app.planner import PlanOptions
from app.service import (
    branch_from_files,
    build_report,
    drill_from_files,
    fe_from_files,
    make_phantom,
    plan_from_files,
)
from app.trajectory import ScrewSpec

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_SOLVER = 3
EXIT_INFEASIBLE = 4

app = typer.Typer(
    name="steerdrill",
    help="Biomechanics-aware curved pedicle screw planning and steerable drilling simulation.",
    add_completion=False,
    no_args_is_help=True,
)


@dataclass(frozen=True)
class RunConfig:
    settings: Settings
    out_dir: Path
    seed: int | None
    tol: float
    threads: int


def _configure_logging(verbose: bool, quiet: bool, default_level: str) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else getattr(logging, default_level)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s %(message)s", force=True)


def _fail(code: int, message: str) -> None:
    typer.echo(f"error: {message}", err=True)
    raise typer.Exit(code=code)


def exit_on_error(command: Callable) -> Callable:
    """Translate domain exceptions into the stable exit codes."""

    @wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except PlanningError as exc:
            for candidate_id, reasons in exc.reasons.items():
                typer.echo(f"  {candidate_id}: {'; '.join(reasons)}", err=True)
            _fail(EXIT_INFEASIBLE, str(exc))
        except SolverError as exc:
            _fail(EXIT_SOLVER, str(exc))
        except (ConfigError, SpecError, DomainError, UsageError, ModelError, ValidationError, IndexError) as exc:
            _fail(EXIT_VALIDATION, str(exc))

    return wrapper


def _run_config(ctx: typer.Context) -> RunConfig:
    return ctx.obj


def _plan_options(config: RunConfig, load_n: float | None = None) -> PlanOptions:
    return replace(PlanOptions.from_settings(config.settings, load_n), tol=config.tol, threads=config.threads)


@app.callback()
@exit_on_error
def main(
    ctx: typer.Context,
    seed: Optional[int] = typer.Option(None, "--seed", help="Override the seed in phantom and trial batch files."),
    out_dir: Optional[Path] = typer.Option(None, "--out-dir", help="Artifact directory (default STEERDRILL_RESULTS_DIR)."),
    tol: Optional[float] = typer.Option(None, "--tol", help="CG relative residual tolerance, in (0, 1e-4]."),
    threads: Optional[int] = typer.Option(None, "--threads", help="Parallel candidate evaluations."),
    verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging."),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Warnings and errors only."),
) -> None:
    settings = get_settings()
    _configure_logging(verbose, quiet, settings.log_level)
    tol = settings.solver_tol if tol is None else tol
    threads = settings.threads if threads is None else threads
    if not 0 < tol <= 1e-4:
        raise UsageError(f"--tol must be in (0, 1e-4], got {tol}")
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")
    ctx.obj = RunConfig(
        settings=settings,
        out_dir=out_dir or Path(settings.results_dir),
        seed=seed,
        tol=tol,
        threads=threads,
    )


@app.command()
@exit_on_error
def phantom(
    ctx: typer.Context,
    spec_path: Path = typer.Argument(Path("config/phantom.json"), help="Phantom spec JSON."),
) -> None:
    """Generate the synthetic vertebra volume (.f32raw + JSON sidecar)."""
    config = _run_config(ctx)
    artifacts = make_phantom(spec_path, config.out_dir, seed=config.seed)
    typer.echo(f"volume: {artifacts.raw_path}")
    typer.echo(f"sidecar: {artifacts.sidecar_path}")
    typer.echo(json.dumps(artifacts.summary, indent=2, sort_keys=True))


@app.command()
@exit_on_error
def plan(
    ctx: typer.Context,
    volume_path: Path = typer.Argument(..., help="Volume .f32raw or sidecar .json."),
    space_path: Path = typer.Argument(Path("config/candidates.json"), help="Candidate space JSON."),
    load_n: Optional[float] = typer.Option(None, "--load-n", help="Endplate load in N (default from the space)."),
) -> None:
    """Evaluate every candidate trajectory and rank the feasible ones."""
    config = _run_config(ctx)
    outcome = plan_from_files(volume_path, space_path, config.out_dir, _plan_options(config, load_n))
    for item in outcome.result.ranked:
        typer.echo(
            f"{item.rank}. {item.report.trajectory_id} curvature={item.report.curvature_per_mm:.6f} "
            f"von_mises={item.report.max_von_mises_mpa:.4f} MPa strain={item.report.max_principal_strain:.4e}"
        )
    typer.echo(f"winner: {outcome.result.winner}")


@app.command()
@exit_on_error
def fe(
    ctx: typer.Context,
    volume_path: Path = typer.Argument(..., help="Volume .f32raw or sidecar .json."),
    trajectory_path: Path = typer.Argument(..., help="Trajectory JSON."),
    name: str = typer.Option("trajectory", "--name", help="Artifact name stem."),
    load_n: float = typer.Option(400.0, "--load-n", help="Endplate load in N."),
    screw_diameter: float = typer.Option(2.5, "--screw-diameter", help="Screw diameter in mm."),
    screw_length: float = typer.Option(55.0, "--screw-length", help="Screw length in mm."),
    flexible_screw: bool = typer.Option(
        False, "--flexible-screw", help="Clamp only the entry layer and let the screw bend with its own modulus."
    ),
) -> None:
    """Solve one trajectory and write its FE summary and stress map."""
    config = _run_config(ctx)
    screw = ScrewSpec(diameter_mm=screw_diameter, length_mm=screw_length)
    evaluation = fe_from_files(
        volume_path,
        trajectory_path,
        config.out_dir,
        replace(_plan_options(config, load_n), rigid_screw=not flexible_screw),
        screw=screw,
        name=name,
    )
    report = evaluation.report
    typer.echo(
        f"{name}: von_mises={report.max_von_mises_mpa:.4f} MPa strain={report.max_principal_strain:.4e} "
        f"iterations={report.solver.iterations}"
    )


@app.command()
@exit_on_error
def drill(
    ctx: typer.Context,
    trajectory_path: Path = typer.Argument(..., help="Planned trajectory JSON (e.g. winner_trajectory.json)."),
    batch_path: Path = typer.Argument(Path("config/trial_batch.json"), help="Trial batch JSON."),
) -> None:
    """Run the seeded drilling trial grid against the heat-set guide."""
    config = _run_config(ctx)
    run, summary = drill_from_files(
        trajectory_path, batch_path, config.out_dir, config.settings.springback_ratio, seed=config.seed
    )
    typer.echo(
        f"trials={summary.trial_count} mean_radius_mm={summary.mean_fitted_radius_mm:.2f} "
        f"error_vs_guide_pct=[{summary.min_radius_error_vs_guide_pct:.2f}, "
        f"{summary.max_radius_error_vs_guide_pct:.2f}] max_deviation_std_mm={summary.max_deviation_std_mm:.3f}"
        f" tracking_error_band_pct={summary.tracking_error_band_pct}"
    )


@app.command()
@exit_on_error
def branch(
    ctx: typer.Context,
    trajectory_path: Path = typer.Argument(..., help="Planned trajectory JSON."),
    batch_path: Path = typer.Argument(Path("config/branch_batch.json"), help="Branch batch JSON."),
) -> None:
    """Drill several branches from one entry at different roll angles."""
    config = _run_config(ctx)
    run, summary = branch_from_files(
        trajectory_path, batch_path, config.out_dir, config.settings.springback_ratio, seed=config.seed
    )
    for row in run.rows:
        typer.echo(f"{row.trial_id} roll={row.roll_deg:g} radius_mm={row.fitted_radius_mm:.2f}")
    typer.echo(f"mean_radius_mm={summary.mean_fitted_radius_mm:.2f}")


@app.command()
@exit_on_error
def report(
    ctx: typer.Context,
    results_dir: Optional[Path] = typer.Argument(None, help="Results directory (default --out-dir)."),
) -> None:
    """Write report.md and the error histogram from existing artifacts."""
    config = _run_config(ctx)
    path = build_report(results_dir or config.out_dir)
    typer.echo(f"report: {path}")


if __name__ == "__main__":
    app()
