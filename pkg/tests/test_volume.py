import json

import numpy as np
import pytest

from app.config import load_phantom_spec
from app.errors import DomainError, SpecError, UsageError
from app.models import LowBmdEllipsoid, PhantomSpec
from app.volume import (
    MaterialClass,
    SCREW_MODULUS_MPA,
    DensityVolume,
    build_material_field,
    class_histogram,
    classify,
    classify_array,
    density_to_modulus,
    generate_phantom,
    hu_histogram_deciles,
    hu_to_density,
    read_volume,
    write_volume,
)
from tests.conftest import CONFIG_DIR


def test_hu_to_density_matches_scalar_formula():
    hu = np.random.default_rng(0).uniform(-1000.0, 3000.0, 1000)
    vectorized = hu_to_density(hu)
    for value, rho in zip(hu, vectorized):
        expected = 1.122 * float(value) + 47.0
        assert hu_to_density(float(value)) == pytest.approx(expected, rel=1e-9)
        assert rho == pytest.approx(expected, rel=1e-9)


def test_hu_to_density_examples():
    assert hu_to_density(0.0) == pytest.approx(47.0)
    assert hu_to_density(1000.0) == pytest.approx(1169.0)


def test_density_to_modulus_matches_power_law():
    rho = np.random.default_rng(1).uniform(10.0, 2000.0, 1000)
    cancellous = density_to_modulus(rho, MaterialClass.CANCELLOUS)
    cortical = density_to_modulus(rho, MaterialClass.CORTICAL)
    assert np.allclose(cancellous, 0.63 * rho**1.35, rtol=1e-9, atol=0)
    assert np.allclose(cortical, 1.89 * rho**1.35, rtol=1e-9, atol=0)
    assert density_to_modulus(1.0, MaterialClass.CANCELLOUS) == pytest.approx(0.63)
    assert density_to_modulus(1.0, MaterialClass.CORTICAL) == pytest.approx(1.89)


def test_density_to_modulus_rejects_non_bone_and_bad_density():
    with pytest.raises(UsageError):
        density_to_modulus(100.0, MaterialClass.VOID)
    with pytest.raises(UsageError):
        density_to_modulus(100.0, MaterialClass.SCREW)
    with pytest.raises(DomainError):
        density_to_modulus(0.0, MaterialClass.CANCELLOUS)
    with pytest.raises(DomainError):
        density_to_modulus(-5.0, MaterialClass.CORTICAL)


@pytest.mark.parametrize(
    "hu, expected",
    [
        (np.nextafter(100.0, 0.0), MaterialClass.VOID),
        (100.0, MaterialClass.CANCELLOUS),
        (np.nextafter(1800.0, 0.0), MaterialClass.CANCELLOUS),
        (1800.0, MaterialClass.CORTICAL),
        (-1000.0, MaterialClass.VOID),
    ],
)
def test_classify_thresholds(hu, expected):
    assert classify(float(hu)) == expected
    assert classify_array(np.array([hu]))[0] == expected


def test_classify_rejects_nan():
    with pytest.raises(DomainError):
        classify(float("nan"))
    with pytest.raises(DomainError):
        hu_to_density(np.array([1.0, np.nan]))


def test_phantom_without_noise_has_constant_core_and_cortical_shell():
    spec = PhantomSpec(outer_mm=(10.0, 10.0, 10.0), shell_mm=2.0, cancellous_hu=400.0, cortical_hu=2000.0)
    vol = generate_phantom(spec)
    assert vol.dims == (10, 10, 10)
    assert np.all(vol.hu[2:8, 2:8, 2:8] == 400.0)
    shell = np.ones(vol.dims, dtype=bool)
    shell[2:8, 2:8, 2:8] = False
    assert np.all(vol.hu[shell] == 2000.0)


def test_phantom_margin_is_void(small_phantom_spec):
    vol = generate_phantom(small_phantom_spec)
    assert vol.dims == (32, 22, 18)
    classes = classify_array(vol.hu)
    assert np.all(classes[0] == MaterialClass.VOID)
    assert np.all(classes[:, :, -1] == MaterialClass.VOID)
    assert classes[1, 1, 1] == MaterialClass.CORTICAL
    assert classes[16, 11, 9] == MaterialClass.CANCELLOUS


def test_phantom_ellipsoid_sets_minimum_interior_hu():
    spec = PhantomSpec(
        outer_mm=(20.0, 20.0, 20.0),
        shell_mm=2.0,
        cancellous_hu=400.0,
        cortical_hu=2000.0,
        ellipsoid=LowBmdEllipsoid(center_mm=(10.0, 10.0, 10.0), radii_mm=(4.0, 3.0, 3.0), hu=120.0),
    )
    vol = generate_phantom(spec)
    interior = vol.hu[2:18, 2:18, 2:18]
    assert interior.min() == 120.0
    assert vol.hu[10, 10, 10] == 120.0
    assert vol.hu[3, 3, 3] == 400.0


def test_extra_weak_regions_paint_in_order():
    spec = PhantomSpec(
        outer_mm=(20.0, 20.0, 20.0),
        shell_mm=2.0,
        cancellous_hu=400.0,
        cortical_hu=2000.0,
        ellipsoid=LowBmdEllipsoid(center_mm=(6.0, 10.0, 10.0), radii_mm=(3.0, 3.0, 3.0), hu=150.0),
        extra_ellipsoids=(
            LowBmdEllipsoid(center_mm=(14.0, 10.0, 10.0), radii_mm=(3.0, 3.0, 3.0), hu=130.0),
            LowBmdEllipsoid(center_mm=(8.0, 10.0, 10.0), radii_mm=(1.0, 1.0, 1.0), hu=110.0),
        ),
    )
    vol = generate_phantom(spec)
    assert vol.hu[5, 10, 10] == 150.0
    assert vol.hu[14, 10, 10] == 130.0
    assert vol.hu[7, 9, 9] == 110.0
    assert vol.hu[10, 10, 10] == 400.0


def test_bundled_phantom_has_two_weak_pockets():
    vol = generate_phantom(load_phantom_spec(CONFIG_DIR / "phantom.json"))
    assert vol.hu[49, 12, 14] < 200.0
    assert vol.hu[50, 22, 14] < 200.0
    assert np.median(vol.hu[10:30, 8:20, 8:20]) == pytest.approx(400.0, abs=10.0)


def test_phantom_is_deterministic_for_a_seed():
    spec = PhantomSpec(outer_mm=(12.0, 12.0, 12.0), shell_mm=2.0, cancellous_hu=400.0, cortical_hu=2000.0, noise_hu=50.0, seed=5)
    first = generate_phantom(spec).hu
    second = generate_phantom(spec).hu
    other = generate_phantom(spec.model_copy(update={"seed": 6})).hu
    assert np.array_equal(first, second)
    assert not np.array_equal(first, other)
    classes = classify_array(first)
    assert np.all(classes[2:10, 2:10, 2:10] == MaterialClass.CANCELLOUS)


def test_phantom_shell_thicker_than_block_is_rejected():
    spec = PhantomSpec(outer_mm=(6.0, 20.0, 20.0), shell_mm=3.5, cancellous_hu=400.0, cortical_hu=2000.0)
    with pytest.raises(SpecError):
        generate_phantom(spec)


def test_phantom_spec_rejects_negative_spacing():
    with pytest.raises(ValueError, match="spacing_mm"):
        PhantomSpec(outer_mm=(10.0, 10.0, 10.0), spacing_mm=(1.0, -1.0, 1.0), shell_mm=1.0, cancellous_hu=400.0, cortical_hu=2000.0)


def test_bundled_phantom_contains_every_tissue_class():
    histogram = class_histogram(generate_phantom(load_phantom_spec(CONFIG_DIR / "phantom.json")))
    assert histogram["void"] > 0
    assert histogram["cancellous"] > 0
    assert histogram["cortical"] > 0


def test_volume_files_round_trip(tmp_path, small_phantom_spec):
    vol = generate_phantom(small_phantom_spec.model_copy(update={"noise_hu": 30.0}))
    raw_path, sidecar_path = write_volume(vol, tmp_path / "phantom")
    assert raw_path.suffix == ".f32raw"
    assert raw_path.stat().st_size == 4 * vol.hu.size
    sidecar = json.loads(sidecar_path.read_text())
    assert sidecar["dims"] == list(vol.dims)

    loaded = read_volume(sidecar_path)
    assert loaded.dims == vol.dims
    assert np.array_equal(loaded.hu, vol.hu.astype(np.float32).astype(np.float64))
    # x-fastest on disk
    flat = np.frombuffer(raw_path.read_bytes(), dtype="<f4")
    assert flat[1] == np.float32(vol.hu[1, 0, 0])


def test_density_volume_rejects_wrong_size():
    with pytest.raises(SpecError):
        DensityVolume(dims=(2, 2, 2), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), hu=np.zeros(7))


def test_material_field_marks_screw_voxels():
    vol = DensityVolume(dims=(4, 4, 4), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), hu=np.full((4, 4, 4), 500.0))
    material = build_material_field(vol, np.array([[1, 1, 1], [2, 1, 1]]))
    assert material.count(MaterialClass.SCREW) == 2
    assert material.modulus[1, 1, 1] == SCREW_MODULUS_MPA
    assert material.modulus[0, 0, 0] == pytest.approx(0.63 * (1.122 * 500.0 + 47.0) ** 1.35)
    with pytest.raises(IndexError):
        build_material_field(vol, np.array([[4, 0, 0]]))


def test_hu_deciles_are_sorted():
    spec = PhantomSpec(outer_mm=(8.0, 8.0, 8.0), shell_mm=1.0, cancellous_hu=400.0, cortical_hu=2000.0, noise_hu=40.0)
    deciles = hu_histogram_deciles(generate_phantom(spec))
    assert len(deciles) == 11
    assert deciles == sorted(deciles)
    assert deciles[-1] == 2000.0
