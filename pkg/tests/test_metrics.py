import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.errors import DomainError
from app.metrics import (
    evaluate_path,
    fit_circle,
    improvement_percent,
    nearest_arc_lengths,
    path_deviation,
    radius_error_percent,
    summarize_trials,
)
from app.models import TrialRow
from app.trajectory import Trajectory, sample_points


def _arc_points(radius, start_deg=0.0, sweep_deg=60.0, count=50, center=(10.0, -4.0, 3.0)):
    angles = np.radians(np.linspace(start_deg, start_deg + sweep_deg, count))
    u = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
    v = np.array([0.0, 0.0, 1.0])
    return np.asarray(center) + radius * (np.outer(np.cos(angles), u) + np.outer(np.sin(angles), v))


def _curved(curvature=1 / 35.0):
    return Trajectory(
        entry_mm=(0.0, 0.0, 0.0),
        direction=(1.0, 0.0, 0.0),
        bend_plane_normal=(0.0, 0.0, 1.0),
        straight_length_mm=25.0,
        curvature_per_mm=curvature,
        total_length_mm=55.0,
    )


def _row(index: int, guide_error: float, radius: float) -> TrialRow:
    return TrialRow(
        trial_id=f"trial-{index:02d}",
        tip_kind="oval_head",
        insertion_speed_mm_s=0.85,
        rpm=8250,
        repetition=index,
        seed=index,
        roll_deg=0.0,
        tracking_error=0.02,
        drilling_time_s=50.0 + index,
        hole_width_mm=8.3,
        fitted_radius_mm=radius,
        radius_error_vs_planned_pct=guide_error + 0.3,
        radius_error_vs_guide_pct=guide_error,
        deviation_std_mm=0.1 * index,
        deviation_max_mm=0.3 * index,
    )


def test_improvement_percent_reference_values():
    assert 80.0 <= improvement_percent(1.01, 0.20) <= 80.4
    assert 77.4 <= improvement_percent(9.11e-2, 2.05e-2) <= 77.6
    assert improvement_percent(2.0, 3.0) == pytest.approx(-50.0)


@pytest.mark.parametrize("baseline", [0.0, -1.0, math.nan])
def test_improvement_percent_rejects_bad_baseline(baseline):
    with pytest.raises(DomainError):
        improvement_percent(baseline, 0.1)


def test_radius_error_percent():
    assert radius_error_percent(69.5, 71.1) == pytest.approx(2.30, abs=0.05)
    assert radius_error_percent(70.0, 68.6) == pytest.approx(2.0)
    with pytest.raises(DomainError):
        radius_error_percent(0.0, 10.0)


@pytest.mark.parametrize("radius", [35.0, 69.5, 500.0])
def test_fit_circle_recovers_clean_arc(radius):
    fit = fit_circle(_arc_points(radius))
    assert fit.radius_mm == pytest.approx(radius, rel=1e-9)
    assert np.allclose(fit.center, [10.0, -4.0, 3.0], atol=1e-6 * radius)
    assert abs(fit.normal @ (np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0))) == pytest.approx(1.0)
    assert fit.rms_residual_mm < 1e-8
    assert fit.curvature_per_mm == pytest.approx(1.0 / radius, rel=1e-9)


def test_fit_circle_with_known_plane():
    points = _arc_points(40.0)
    plane = (np.array([10.0, -4.0, 3.0]), np.array([1.0, -1.0, 0.0]))
    assert fit_circle(points, plane=plane).radius_mm == pytest.approx(40.0, rel=1e-9)


def test_fit_circle_noisy_arc_is_close():
    rng = np.random.default_rng(5)
    points = _arc_points(70.0, sweep_deg=45.0, count=400)
    points += rng.normal(0.0, 0.05, size=points.shape)
    assert fit_circle(points).radius_mm == pytest.approx(70.0, rel=0.01)


def test_fit_circle_radius_ignores_rigid_motion():
    rng = np.random.default_rng(9)
    points = _arc_points(70.0, sweep_deg=45.0, count=200) + rng.normal(0.0, 0.05, size=(200, 3))
    rotation = Rotation.from_euler("xyz", [30.0, -50.0, 110.0], degrees=True)
    moved = rotation.apply(points) + np.array([120.0, -35.0, 8.0])
    assert fit_circle(moved).radius_mm == pytest.approx(fit_circle(points).radius_mm, rel=1e-9)


def test_fit_circle_collinear_is_straight():
    points = np.column_stack([np.linspace(0, 30, 10), np.zeros(10), np.zeros(10)])
    fit = fit_circle(points)
    assert fit.is_straight
    assert math.isinf(fit.radius_mm)
    assert fit.curvature_per_mm == 0.0


def test_fit_circle_needs_three_points():
    with pytest.raises(DomainError):
        fit_circle([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def test_nearest_arc_lengths_for_out_of_plane_offsets():
    traj = _curved()
    s = np.array([0.0, 3.0, 24.9, 25.0, 31.7, 50.0, 55.0])
    points = sample_points(traj, s) + np.array([0.0, 0.0, 0.4])
    assert np.allclose(nearest_arc_lengths(traj, points), s, atol=1e-6)


def test_path_deviation_statistics():
    traj = _curved()
    s = np.linspace(0.0, 55.0, 40)
    offsets = np.where(np.arange(40) % 2 == 0, 0.0, 0.6)
    points = sample_points(traj, s) + np.outer(offsets, [0.0, 0.0, 1.0])
    deviation = path_deviation(points, traj)
    assert deviation.std_mm == pytest.approx(0.3, abs=1e-6)
    assert deviation.max_mm == pytest.approx(0.6, abs=1e-6)


def test_path_deviation_needs_points():
    with pytest.raises(DomainError):
        path_deviation(np.zeros((0, 3)), _curved())
    with pytest.raises(DomainError):
        path_deviation(np.zeros((1, 3)), _curved())


def test_evaluate_path_against_guide_and_plan():
    guide = Trajectory(
        entry_mm=(0.0, 0.0, 0.0),
        direction=(1.0, 0.0, 0.0),
        bend_plane_normal=(0.0, 0.0, 1.0),
        straight_length_mm=0.0,
        curvature_per_mm=1 / 71.1,
        total_length_mm=45.0,
    )
    points = sample_points(guide, np.linspace(0.0, 45.0, 90))
    report = evaluate_path(points, guide, planned_curvature_per_mm=1 / 69.5)
    assert report.fitted_radius_mm == pytest.approx(71.1, rel=1e-8)
    assert report.radius_error_vs_planned_pct == pytest.approx(2.30, abs=0.05)
    assert report.radius_error_vs_guide_pct == pytest.approx(0.0, abs=1e-6)
    assert report.deviation_max_mm < 1e-6


def test_evaluate_straight_path_against_curved_plan():
    guide = Trajectory.straight((0.0, 0.0, 0.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length_mm=40.0)
    points = sample_points(guide, np.linspace(0.0, 40.0, 20))
    report = evaluate_path(points, guide, planned_curvature_per_mm=1 / 69.5)
    assert report.is_straight
    assert report.radius_error_vs_planned_pct == 100.0
    assert report.radius_error_vs_guide_pct == 0.0


def test_summarize_trials():
    rows = [_row(1, 1.8, 70.8), _row(2, 2.1, 71.0), _row(3, 2.0, 71.2)]
    summary = summarize_trials(rows)
    assert summary.trial_count == 3
    assert summary.mean_radius_error_vs_guide_pct == pytest.approx(1.9667, abs=1e-4)
    assert summary.min_radius_error_vs_guide_pct == pytest.approx(1.8)
    assert summary.max_radius_error_vs_guide_pct == pytest.approx(2.1)
    assert summary.mean_radius_error_vs_planned_pct == pytest.approx(2.2667, abs=1e-4)
    assert summary.mean_fitted_radius_mm == pytest.approx(71.0)
    assert summary.max_deviation_std_mm == pytest.approx(0.3)
    assert summary.mean_drilling_time_s == pytest.approx(52.0)
    assert summary.mean_tracking_error_pct == pytest.approx(2.0)
    assert summary.tracking_error_band_pct is None
    banded = summarize_trials(rows, tracking_error_band=(0.017, 0.022))
    assert banded.tracking_error_band_pct == pytest.approx((1.7, 2.2))
    with pytest.raises(DomainError):
        summarize_trials([])


def test_fit_circle_is_stable_under_a_duplicated_point():
    points = _arc_points(69.5, count=20)
    duplicated = np.vstack([points, points[7:8]])
    assert fit_circle(duplicated).radius_mm == pytest.approx(fit_circle(points).radius_mm, rel=1e-9)


def test_fit_circle_mean_radius_under_seeded_noise():
    clean = _arc_points(69.5, sweep_deg=50.0, count=200)
    radii = []
    for seed in range(30):
        noisy = clean + np.random.default_rng(seed).normal(0.0, 0.3, size=clean.shape)
        radii.append(fit_circle(noisy).radius_mm)
    assert np.mean(radii) == pytest.approx(69.5, rel=0.01)
