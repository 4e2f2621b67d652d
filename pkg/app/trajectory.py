"""Straight and constant-curvature drilling trajectories.

A trajectory is a straight segment of ``straight_length_mm`` along ``direction``
followed by a planar circular arc of curvature ``curvature_per_mm``. The arc
bends toward ``bend_plane_normal x direction``. Lengths are in mm, curvature
in 1/mm.
"""

import logging
import math
from typing import Protocol

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from app.errors import DomainError, ScrewOutOfBoundsError

logger = logging.getLogger(__name__)

Vector3 = tuple[float, float, float]

ORTHOGONALITY_TOLERANCE = 1e-9
ARC_LENGTH_SLACK_MM = 1e-9
REFERENCE_STRAIGHT_LENGTH_MM = 25.0
REFERENCE_SCREW_DIAMETER_MM = 2.5
REFERENCE_SCREW_LENGTH_MM = 55.0
REFERENCE_RADII_MM = (69.5, 35.0)


class GridGeometry(Protocol):
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]


def orthonormal_frame(direction, normal) -> tuple[Vector3, Vector3]:
    """Unit direction and bend-plane normal, with the normal re-orthogonalized to round-off."""
    direction = np.asarray(direction, dtype=float)
    normal = np.asarray(normal, dtype=float)
    if direction.shape != (3,) or normal.shape != (3,):
        raise ValueError("direction and bend_plane_normal must be 3-vectors")
    d_norm = np.linalg.norm(direction)
    n_norm = np.linalg.norm(normal)
    if not (np.isfinite(d_norm) and d_norm > 0 and np.isfinite(n_norm) and n_norm > 0):
        raise ValueError("direction and bend_plane_normal must be non-zero")
    direction = direction / d_norm
    normal = normal / n_norm
    if abs(float(direction @ normal)) > ORTHOGONALITY_TOLERANCE:
        raise ValueError("bend_plane_normal must be orthogonal to direction")
    normal = normal - float(direction @ normal) * direction
    normal = normal / np.linalg.norm(normal)
    return tuple(float(v) for v in direction), tuple(float(v) for v in normal)


class ScrewSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    diameter_mm: float = Field(default=REFERENCE_SCREW_DIAMETER_MM, gt=0)
    length_mm: float = Field(default=REFERENCE_SCREW_LENGTH_MM, gt=0)


class Trajectory(BaseModel):
    model_config = ConfigDict(frozen=True)

    entry_mm: Vector3
    direction: Vector3
    bend_plane_normal: Vector3
    straight_length_mm: float = Field(default=REFERENCE_STRAIGHT_LENGTH_MM, ge=0)
    curvature_per_mm: float = Field(default=0.0, ge=0)
    total_length_mm: float = Field(default=REFERENCE_SCREW_LENGTH_MM, gt=0)

    @model_validator(mode="before")
    @classmethod
    def normalize_frame(cls, data: dict) -> dict:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        if "direction" not in data or "bend_plane_normal" not in data:
            return data
        data["direction"], data["bend_plane_normal"] = orthonormal_frame(
            data["direction"], data["bend_plane_normal"]
        )
        return data

    @model_validator(mode="after")
    def straight_within_total(self) -> "Trajectory":
        if self.straight_length_mm > self.total_length_mm:
            raise ValueError("straight_length_mm must not exceed total_length_mm")
        return self

    @property
    def bend_side(self) -> np.ndarray:
        side = np.cross(self.bend_plane_normal, self.direction)
        return side / np.linalg.norm(side)

    @property
    def radius_mm(self) -> float:
        return math.inf if self.curvature_per_mm == 0 else 1.0 / self.curvature_per_mm

    def with_roll(self, roll_deg: float) -> "Trajectory":
        """Rotate the bend plane about the entry direction."""
        axis = np.asarray(self.direction) * math.radians(roll_deg)
        normal = Rotation.from_rotvec(axis).apply(np.asarray(self.bend_plane_normal))
        return self.model_copy(update={"bend_plane_normal": tuple(float(v) for v in normal)})

    @classmethod
    def straight(
        cls,
        entry_mm: Vector3,
        direction: Vector3,
        bend_plane_normal: Vector3,
        length_mm: float = REFERENCE_SCREW_LENGTH_MM,
    ) -> "Trajectory":
        return cls(
            entry_mm=entry_mm,
            direction=direction,
            bend_plane_normal=bend_plane_normal,
            straight_length_mm=length_mm,
            curvature_per_mm=0.0,
            total_length_mm=length_mm,
        )


def curvature_from_radius(radius_mm: float) -> float:
    if not math.isfinite(radius_mm) or radius_mm <= 0:
        raise DomainError(f"radius must be positive and finite, got {radius_mm}")
    return 1.0 / radius_mm


def reference_trajectories(
    entry_mm: Vector3 = (0.0, 0.0, 0.0),
    direction: Vector3 = (1.0, 0.0, 0.0),
    bend_plane_normal: Vector3 = (0.0, 0.0, 1.0),
) -> dict[str, Trajectory]:
    """The straight baseline plus the two designed arcs (radius 69.5 mm and 35 mm)."""
    curvatures = [0.0, *(curvature_from_radius(radius) for radius in REFERENCE_RADII_MM)]
    return {
        f"trajectory-{index}": Trajectory(
            entry_mm=entry_mm,
            direction=direction,
            bend_plane_normal=bend_plane_normal,
            straight_length_mm=REFERENCE_STRAIGHT_LENGTH_MM,
            curvature_per_mm=curvature,
            total_length_mm=REFERENCE_SCREW_LENGTH_MM,
        )
        for index, curvature in enumerate(curvatures, start=1)
    }


def _check_arc_length(traj: Trajectory, s: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(s)):
        raise DomainError("arc length must be finite")
    if np.any(s < -ARC_LENGTH_SLACK_MM) or np.any(s > traj.total_length_mm + ARC_LENGTH_SLACK_MM):
        raise DomainError(
            f"arc length outside [0, {traj.total_length_mm}] mm: "
            f"min={float(np.min(s))}, max={float(np.max(s))}"
        )
    return np.clip(s, 0.0, traj.total_length_mm)


def sample_points(traj: Trajectory, s: np.ndarray) -> np.ndarray:
    """Vectorized ``point_at``; returns an (n, 3) array."""
    s = _check_arc_length(traj, np.atleast_1d(np.asarray(s, dtype=float)))
    entry = np.asarray(traj.entry_mm)
    direction = np.asarray(traj.direction)
    along_straight = np.minimum(s, traj.straight_length_mm)
    u = s - along_straight
    theta = traj.curvature_per_mm * u
    # sin(theta)/k and (1 - cos(theta))/k written so that k -> 0 stays exact.
    forward = u * np.sinc(theta / np.pi)
    lateral = u * (theta / 2.0) * np.sinc(theta / (2.0 * np.pi)) ** 2
    return (
        entry
        + np.outer(along_straight + forward, direction)
        + np.outer(lateral, traj.bend_side)
    )


def sample_tangents(traj: Trajectory, s: np.ndarray) -> np.ndarray:
    s = _check_arc_length(traj, np.atleast_1d(np.asarray(s, dtype=float)))
    theta = traj.curvature_per_mm * np.maximum(s - traj.straight_length_mm, 0.0)
    return np.outer(np.cos(theta), traj.direction) + np.outer(np.sin(theta), traj.bend_side)


def point_at(traj: Trajectory, s: float) -> np.ndarray:
    return sample_points(traj, np.array([s]))[0]


def tangent_at(traj: Trajectory, s: float) -> np.ndarray:
    return sample_tangents(traj, np.array([s]))[0]


def arc_lift(traj: Trajectory, s: float) -> float:
    """Offset of the curve from the entry line toward the bend side at arc length ``s``."""
    return float((point_at(traj, s) - np.asarray(traj.entry_mm)) @ traj.bend_side)


def voxel_centers(grid: GridGeometry, indices: np.ndarray) -> np.ndarray:
    return np.asarray(grid.origin) + (np.asarray(indices, dtype=float) + 0.5) * np.asarray(grid.spacing)


def swept_screw_voxels(traj: Trajectory, screw: ScrewSpec, grid: GridGeometry) -> np.ndarray:
    """Voxels whose centers lie inside the flat-ended screw swept along ``traj``.

    Returns an (n, 3) integer array of (i, j, k) indices ordered x-fastest.
    Raises ScrewOutOfBoundsError when part of the screw lies outside the grid.
    """
    if screw.length_mm > traj.total_length_mm + ARC_LENGTH_SLACK_MM:
        raise DomainError(
            f"screw length {screw.length_mm} mm exceeds trajectory length {traj.total_length_mm} mm"
        )
    spacing = np.asarray(grid.spacing, dtype=float)
    origin = np.asarray(grid.origin, dtype=float)
    dims = np.asarray(grid.dims, dtype=int)
    radius = screw.diameter_mm / 2.0

    step = float(spacing.min()) / 4.0
    sample_count = max(2, int(math.ceil(screw.length_mm / step)) + 1)
    s = np.linspace(0.0, screw.length_mm, sample_count)
    curve = sample_points(traj, s)
    start_tangent, end_tangent = sample_tangents(traj, np.array([0.0, screw.length_mm]))

    lower = np.floor((curve.min(axis=0) - radius - origin) / spacing).astype(int) - 1
    upper = np.ceil((curve.max(axis=0) + radius - origin) / spacing).astype(int) + 1
    axes = [np.arange(lo, hi + 1) for lo, hi in zip(lower, upper)]
    kk, jj, ii = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
    candidates = np.column_stack([ii.ravel(), jj.ravel(), kk.ravel()])
    centers = voxel_centers(grid, candidates)

    distance, _ = cKDTree(curve).query(centers)
    inside = distance <= radius
    inside &= (centers - curve[0]) @ start_tangent >= 0.0
    inside &= (centers - curve[-1]) @ end_tangent <= 0.0
    selected = candidates[inside]

    in_bounds = np.all((selected >= 0) & (selected < dims), axis=1)
    if not np.all(in_bounds):
        escaping = selected[~in_bounds]
        raise ScrewOutOfBoundsError(
            f"screw leaves the grid at {len(escaping)} voxel(s)", escaping=escaping
        )
    logger.debug("swept_screw_voxels count=%d step_mm=%.4f", len(selected), step)
    return selected
