import logging
import math
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial import cKDTree

from app.errors import DomainError
from app.models import PathErrorReport, TrialRow, TrialSummary
from app.trajectory import Trajectory, sample_points

logger = logging.getLogger(__name__)

FIT_MAX_ITERATIONS = 100
FIT_STEP_TOLERANCE_MM = 1e-12
COLLINEAR_TOLERANCE = 1e-10
NEAREST_POINT_TOLERANCE_MM = 1e-9
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class CircleFit(NamedTuple):
    center: np.ndarray
    radius_mm: float
    normal: np.ndarray
    rms_residual_mm: float

    @property
    def is_straight(self) -> bool:
        return math.isinf(self.radius_mm)

    @property
    def curvature_per_mm(self) -> float:
        return 0.0 if self.is_straight else 1.0 / self.radius_mm


class PathDeviation(NamedTuple):
    std_mm: float
    max_mm: float


def improvement_percent(baseline: float, candidate: float) -> float:
    if not math.isfinite(baseline) or baseline <= 0:
        raise DomainError(f"baseline must be > 0, got {baseline}")
    return 100.0 * (baseline - candidate) / baseline


def radius_error_percent(reference_mm: float, measured_mm: float) -> float:
    if not math.isfinite(reference_mm) or reference_mm <= 0:
        raise DomainError(f"reference radius must be > 0, got {reference_mm}")
    return 100.0 * abs(measured_mm - reference_mm) / reference_mm


def _plane_basis(points: np.ndarray, plane: tuple[np.ndarray, np.ndarray] | None):
    centroid = points.mean(axis=0)
    centered = points - centroid
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if plane is not None:
        origin, normal = (np.asarray(v, dtype=float) for v in plane)
        normal = normal / np.linalg.norm(normal)
        helper = vt[0] - (vt[0] @ normal) * normal
        if np.linalg.norm(helper) < COLLINEAR_TOLERANCE:
            helper = np.eye(3)[int(np.argmin(np.abs(normal)))]
            helper = helper - (helper @ normal) * normal
        e1 = helper / np.linalg.norm(helper)
        e2 = np.cross(normal, e1)
        return origin, e1, e2, normal, singular
    normal = vt[2]
    return centroid, vt[0], vt[1], normal, singular


def fit_circle(
    points: Sequence[Sequence[float]] | np.ndarray,
    plane: tuple[np.ndarray, np.ndarray] | None = None,
) -> CircleFit:
    """Algebraic least-squares circle refined by orthogonal-distance regression.

    ``plane`` is an optional (point, normal) pair; by default the best-fit plane
    from principal component analysis is used. Collinear input returns an
    infinite radius.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DomainError(f"need at least 3 points to fit a circle, got {len(pts)}")
    origin, e1, e2, normal, singular = _plane_basis(pts, plane)
    scale = float(singular[0]) if singular[0] > 0 else 1.0
    if len(singular) < 2 or singular[1] <= COLLINEAR_TOLERANCE * scale:
        return CircleFit(center=np.full(3, np.nan), radius_mm=math.inf, normal=normal, rms_residual_mm=0.0)

    local = np.column_stack([(pts - origin) @ e1, (pts - origin) @ e2])
    x, y = local.T
    design = np.column_stack([2.0 * x, 2.0 * y, np.ones_like(x)])
    (a, b, c), *_ = np.linalg.lstsq(design, x**2 + y**2, rcond=None)
    r0 = math.sqrt(max(c + a * a + b * b, 0.0))

    def residuals(params: np.ndarray) -> np.ndarray:
        return np.hypot(x - params[0], y - params[1]) - params[2]

    def jacobian(params: np.ndarray) -> np.ndarray:
        dist = np.maximum(np.hypot(x - params[0], y - params[1]), 1e-300)
        return np.column_stack([-(x - params[0]) / dist, -(y - params[1]) / dist, -np.ones_like(x)])

    start = np.array([a, b, r0])
    if np.max(np.abs(residuals(start))) > FIT_STEP_TOLERANCE_MM:
        refined = least_squares(
            residuals,
            start,
            jac=jacobian,
            method="lm",
            xtol=max(FIT_STEP_TOLERANCE_MM / max(r0, 1.0), 1e-15),
            ftol=1e-15,
            gtol=1e-15,
            max_nfev=FIT_MAX_ITERATIONS,
        )
        params = refined.x
    else:
        params = start
    center = origin + params[0] * e1 + params[1] * e2
    rms = float(np.sqrt(np.mean(residuals(params) ** 2)))
    return CircleFit(center=center, radius_mm=float(abs(params[2])), normal=normal, rms_residual_mm=rms)


def nearest_arc_lengths(planned: Trajectory, points: np.ndarray, tol: float = NEAREST_POINT_TOLERANCE_MM) -> np.ndarray:
    """Arc length of the nearest planned-curve point for every measured point.

    A coarse sampling brackets each minimum, then a golden-section search runs
    on all brackets at once.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    length = planned.total_length_mm
    step = min(0.5, length / 4.0)
    grid = np.linspace(0.0, length, int(math.ceil(length / step)) + 1)
    _, nearest = cKDTree(sample_points(planned, grid)).query(pts)
    lo = grid[np.maximum(nearest - 1, 0)]
    hi = grid[np.minimum(nearest + 1, len(grid) - 1)]

    def distance(s: np.ndarray) -> np.ndarray:
        return np.linalg.norm(sample_points(planned, s) - pts, axis=1)

    iterations = int(math.ceil(math.log(tol / (2.0 * step)) / math.log(_GOLDEN))) + 1
    left = hi - _GOLDEN * (hi - lo)
    right = lo + _GOLDEN * (hi - lo)
    f_left, f_right = distance(left), distance(right)
    for _ in range(iterations):
        move_right = f_left > f_right
        lo = np.where(move_right, left, lo)
        hi = np.where(move_right, hi, right)
        new_left = np.where(move_right, right, hi - _GOLDEN * (hi - lo))
        new_right = np.where(move_right, lo + _GOLDEN * (hi - lo), left)
        f_new = distance(np.where(move_right, new_right, new_left))
        f_left, f_right = np.where(move_right, f_right, f_new), np.where(move_right, f_new, f_left)
        left, right = new_left, new_right
    candidates = np.column_stack([lo, hi, 0.5 * (lo + hi)])
    distances = np.column_stack([distance(candidates[:, column]) for column in range(3)])
    return candidates[np.arange(len(pts)), np.argmin(distances, axis=1)]


def path_deviation(measured: Sequence[Sequence[float]] | np.ndarray, planned: Trajectory) -> PathDeviation:
    """Population std and max of point-to-curve distances."""
    pts = np.asarray(measured, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise DomainError("no measured points")
    if len(pts) < 2:
        raise DomainError("need at least 2 measured points")
    s = nearest_arc_lengths(planned, pts)
    distances = np.linalg.norm(sample_points(planned, s) - pts, axis=1)
    return PathDeviation(std_mm=float(np.std(distances)), max_mm=float(np.max(distances)))


def evaluate_path(
    points: np.ndarray,
    guide: Trajectory,
    planned_curvature_per_mm: float,
) -> PathErrorReport:
    """Circle-fit a realized path and compare it with the planned and the guide radius."""
    fit = fit_circle(points)
    deviation = path_deviation(points, guide)
    logger.debug(
        "path_evaluated radius_mm=%.4f deviation_std_mm=%.4f", fit.radius_mm, deviation.std_mm
    )
    if fit.is_straight:
        planned_error = 0.0 if planned_curvature_per_mm == 0 else 100.0
        guide_error = 0.0 if guide.curvature_per_mm == 0 else 100.0
    else:
        planned_error = (
            radius_error_percent(1.0 / planned_curvature_per_mm, fit.radius_mm)
            if planned_curvature_per_mm > 0
            else 100.0
        )
        guide_error = (
            radius_error_percent(guide.radius_mm, fit.radius_mm) if guide.curvature_per_mm > 0 else 100.0
        )
    return PathErrorReport(
        fitted_radius_mm=fit.radius_mm,
        fitted_curvature_per_mm=fit.curvature_per_mm,
        is_straight=fit.is_straight,
        radius_error_vs_planned_pct=planned_error,
        radius_error_vs_guide_pct=guide_error,
        deviation_std_mm=deviation.std_mm,
        deviation_max_mm=deviation.max_mm,
    )


def summarize_trials(
    rows: Sequence[TrialRow], tracking_error_band: tuple[float, float] | None = None
) -> TrialSummary:
    """Aggregate trial rows; ``tracking_error_band`` records the band the rows' deviations were drawn from."""
    if not rows:
        raise DomainError("no trials to summarize")
    guide_errors = np.array([row.radius_error_vs_guide_pct for row in rows])
    return TrialSummary(
        trial_count=len(rows),
        mean_radius_error_vs_guide_pct=float(guide_errors.mean()),
        min_radius_error_vs_guide_pct=float(guide_errors.min()),
        max_radius_error_vs_guide_pct=float(guide_errors.max()),
        mean_radius_error_vs_planned_pct=float(np.mean([row.radius_error_vs_planned_pct for row in rows])),
        mean_fitted_radius_mm=float(np.mean([row.fitted_radius_mm for row in rows])),
        max_deviation_std_mm=float(max(row.deviation_std_mm for row in rows)),
        mean_drilling_time_s=float(np.mean([row.drilling_time_s for row in rows])),
        mean_tracking_error_pct=float(np.mean([row.tracking_error for row in rows])) * 100.0,
        tracking_error_band_pct=(
            None if tracking_error_band is None else (tracking_error_band[0] * 100.0, tracking_error_band[1] * 100.0)
        ),
    )
