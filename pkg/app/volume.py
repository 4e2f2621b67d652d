"""Calibrated density volumes and the HU -> material mapping.

Arrays are indexed ``[i, j, k]`` (x, y, z). ``origin`` is the minimum corner of
voxel (0, 0, 0), so voxel centers sit at ``origin + (index + 0.5) * spacing``.
Flattened files use x-fastest ordering (Fortran order of the ``[i, j, k]`` array).
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from app.config import load_json_model
from app.errors import DomainError, SpecError, UsageError
from app.models import CORTICAL_THRESHOLD_HU, SEGMENTATION_THRESHOLD_HU, PhantomSpec, VolumeSidecar

logger = logging.getLogger(__name__)

DENSITY_SLOPE = 1.122
DENSITY_INTERCEPT = 47.0
CANCELLOUS_COEFFICIENT = 0.63
CORTICAL_COEFFICIENT = 1.89
MODULUS_EXPONENT = 1.35
SCREW_MODULUS_MPA = 200_000.0
DEFAULT_POISSON = 0.3


class MaterialClass(IntEnum):
    VOID = 0
    CANCELLOUS = 1
    CORTICAL = 2
    SCREW = 3


@dataclass(frozen=True, eq=False)
class DensityVolume:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    hu: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(int(n) < 1 for n in self.dims):
            raise SpecError(f"dims must be three integers >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(not (s > 0) for s in self.spacing):
            raise SpecError(f"spacing must be three values > 0, got {self.spacing}")
        hu = np.array(self.hu, dtype=np.float64)
        if hu.size != math.prod(self.dims):
            raise SpecError(f"hu has {hu.size} values, expected {math.prod(self.dims)}")
        if not np.all(np.isfinite(hu)):
            raise SpecError("hu values must be finite")
        hu = hu.reshape(self.dims, order="F") if hu.ndim == 1 else hu.reshape(self.dims)
        hu.setflags(write=False)
        object.__setattr__(self, "hu", hu)
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @property
    def voxel_volume_mm3(self) -> float:
        return math.prod(self.spacing)


@dataclass(frozen=True, eq=False)
class MaterialField:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    material_class: np.ndarray = field(repr=False)
    modulus: np.ndarray = field(repr=False)
    poisson: float = DEFAULT_POISSON

    def __post_init__(self) -> None:
        for array in (self.material_class, self.modulus):
            if array.shape != self.dims:
                raise SpecError(f"material arrays must have shape {self.dims}, got {array.shape}")
            array.setflags(write=False)

    def count(self, material_class: MaterialClass) -> int:
        return int(np.count_nonzero(self.material_class == material_class))


def _require_finite(hu: np.ndarray) -> None:
    if not np.all(np.isfinite(hu)):
        raise DomainError("HU values must be finite")


def hu_to_density(hu):
    """Linear QCT calibration; returns density in the calibration's own units."""
    values = np.asarray(hu, dtype=float)
    _require_finite(values)
    density = DENSITY_SLOPE * values + DENSITY_INTERCEPT
    return float(density) if density.ndim == 0 else density


def density_to_modulus(rho, material_class: MaterialClass):
    """Power-law modulus in MPa for cancellous or cortical bone."""
    if material_class == MaterialClass.CANCELLOUS:
        coefficient = CANCELLOUS_COEFFICIENT
    elif material_class == MaterialClass.CORTICAL:
        coefficient = CORTICAL_COEFFICIENT
    else:
        raise UsageError(f"no density-derived modulus for {MaterialClass(material_class).name}")
    values = np.asarray(rho, dtype=float)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise DomainError("density must be finite and > 0")
    modulus = coefficient * values**MODULUS_EXPONENT
    return float(modulus) if modulus.ndim == 0 else modulus


def classify(hu: float) -> MaterialClass:
    if not math.isfinite(hu):
        raise DomainError(f"HU must be finite, got {hu}")
    if hu < SEGMENTATION_THRESHOLD_HU:
        return MaterialClass.VOID
    if hu < CORTICAL_THRESHOLD_HU:
        return MaterialClass.CANCELLOUS
    return MaterialClass.CORTICAL


def classify_array(hu: np.ndarray) -> np.ndarray:
    values = np.asarray(hu, dtype=float)
    _require_finite(values)
    classes = np.full(values.shape, MaterialClass.VOID, dtype=np.uint8)
    classes[values >= SEGMENTATION_THRESHOLD_HU] = MaterialClass.CANCELLOUS
    classes[values >= CORTICAL_THRESHOLD_HU] = MaterialClass.CORTICAL
    return classes


def generate_phantom(spec: PhantomSpec) -> DensityVolume:
    """Rectangular vertebra stand-in: cortical shell, cancellous core, optional weak ellipsoids.

    The block starts ``margin_mm`` inside the grid on every side; the margin is void.
    """
    spacing = np.asarray(spec.spacing_mm)
    outer = np.asarray(spec.outer_mm)
    if 2.0 * spec.shell_mm > float(outer.min()):
        raise SpecError(
            f"shell_mm={spec.shell_mm} is thicker than half the smallest block extent {outer.min()}"
        )
    dims = tuple(max(1, int(round(extent))) for extent in (outer + 2.0 * spec.margin_mm) / spacing)

    centers = [(np.arange(n) + 0.5) * h for n, h in zip(dims, spacing)]
    x, y, z = np.meshgrid(*centers, indexing="ij")
    bx, by, bz = x - spec.margin_mm, y - spec.margin_mm, z - spec.margin_mm
    depth = np.minimum.reduce([bx, outer[0] - bx, by, outer[1] - by, bz, outer[2] - bz])
    block = depth > 0
    shell = block & (depth < spec.shell_mm)

    hu = np.full(dims, spec.cancellous_hu, dtype=np.float64)
    weak_regions = [spec.ellipsoid] if spec.ellipsoid is not None else []
    for ellipsoid in [*weak_regions, *spec.extra_ellipsoids]:
        center = np.asarray(ellipsoid.center_mm) - np.asarray(spec.origin_mm)
        radii = np.asarray(ellipsoid.radii_mm)
        inside = (
            ((x - center[0]) / radii[0]) ** 2
            + ((y - center[1]) / radii[1]) ** 2
            + ((z - center[2]) / radii[2]) ** 2
        ) <= 1.0
        hu[inside] = ellipsoid.hu
    if spec.noise_hu > 0:
        rng = np.random.default_rng(spec.seed)
        hu += rng.normal(0.0, spec.noise_hu, size=dims)
        # Noise must not move interior voxels out of the cancellous band.
        np.clip(hu, SEGMENTATION_THRESHOLD_HU, np.nextafter(CORTICAL_THRESHOLD_HU, 0.0), out=hu)
    hu[shell] = spec.cortical_hu
    hu[~block] = spec.void_hu

    logger.info(
        "phantom_generated dims=%s spacing_mm=%s seed=%d weak_regions=%d margin_mm=%.1f",
        dims,
        tuple(spacing.tolist()),
        spec.seed,
        len(weak_regions) + len(spec.extra_ellipsoids),
        spec.margin_mm,
    )
    return DensityVolume(dims=dims, spacing=tuple(spacing.tolist()), origin=spec.origin_mm, hu=hu)


def build_material_field(vol: DensityVolume, screw_voxels: np.ndarray | None = None) -> MaterialField:
    classes = classify_array(vol.hu)
    modulus = np.zeros(vol.dims, dtype=np.float64)
    density = hu_to_density(vol.hu)
    for bone in (MaterialClass.CANCELLOUS, MaterialClass.CORTICAL):
        mask = classes == bone
        if np.any(mask):
            modulus[mask] = density_to_modulus(density[mask], bone)

    if screw_voxels is not None and len(screw_voxels) > 0:
        indices = np.asarray(screw_voxels, dtype=int).reshape(-1, 3)
        out_of_bounds = np.any((indices < 0) | (indices >= np.asarray(vol.dims)), axis=1)
        if np.any(out_of_bounds):
            raise IndexError(
                f"{int(out_of_bounds.sum())} screw voxel(s) outside grid {vol.dims}, "
                f"first {tuple(indices[out_of_bounds][0])}"
            )
        i, j, k = indices.T
        classes[i, j, k] = MaterialClass.SCREW
        modulus[i, j, k] = SCREW_MODULUS_MPA

    return MaterialField(
        dims=vol.dims,
        spacing=vol.spacing,
        origin=vol.origin,
        material_class=classes,
        modulus=modulus,
    )


def class_histogram(vol: DensityVolume) -> dict[str, int]:
    classes = classify_array(vol.hu)
    return {
        material.name.lower(): int(np.count_nonzero(classes == material))
        for material in (MaterialClass.VOID, MaterialClass.CANCELLOUS, MaterialClass.CORTICAL)
    }


def hu_histogram_deciles(vol: DensityVolume) -> list[float]:
    return [float(v) for v in np.percentile(vol.hu, np.arange(0, 101, 10))]


def _volume_paths(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix in {".f32raw", ".json"}:
        base = base.with_suffix("")
    return base.with_suffix(".f32raw"), base.with_suffix(".json")


def write_volume(vol: DensityVolume, path: str | Path) -> tuple[Path, Path]:
    raw_path, sidecar_path = _volume_paths(path)
    raw_path.parent.mkdir(parents=True, exist_ok=True)
    raw_path.write_bytes(vol.hu.astype("<f4").tobytes(order="F"))
    sidecar = VolumeSidecar(dims=vol.dims, spacing_mm=vol.spacing, origin_mm=vol.origin)
    sidecar_path.write_text(json.dumps(sidecar.model_dump(mode="json"), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("volume_written raw=%s sidecar=%s", raw_path, sidecar_path)
    return raw_path, sidecar_path


def read_volume(path: str | Path) -> DensityVolume:
    raw_path, sidecar_path = _volume_paths(path)
    sidecar = load_json_model(sidecar_path, VolumeSidecar)
    if not raw_path.exists():
        raise SpecError(f"Missing volume data file: {raw_path}")
    values = np.frombuffer(raw_path.read_bytes(), dtype="<f4").astype(np.float64)
    return DensityVolume(dims=sidecar.dims, spacing=sidecar.spacing_mm, origin=sidecar.origin_mm, hu=values)
