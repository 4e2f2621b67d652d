import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.errors import DisconnectedMeshError, DomainError, ModelError, SolverError
from app.fem import (
    FeModel,
    StiffnessOperator,
    assemble_and_solve,
    build_model,
    cancellous_extrema,
    dense_reference_solve,
    element_nodes,
    face_mean_displacement,
    node_count,
    node_index,
    recover_stress_strain,
    reference_stiffness,
    von_mises,
)
from app.trajectory import ScrewSpec, Trajectory, swept_screw_voxels
from app.volume import MaterialClass, MaterialField, build_material_field, generate_phantom
from tests.conftest import block_material


def _face_nodes(dims, k):
    nx, ny, _ = dims
    i, j = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    return np.unique(node_index(dims, i.ravel(), j.ravel(), k))


def _roller_model(material: MaterialField, load_n: float = 400.0) -> FeModel:
    """Bottom face on z rollers, one corner pinned and one in-plane dof held against spin."""
    dims = material.dims
    bottom = _face_nodes(dims, 0)
    corner = node_index(dims, dims[0], 0, 0)
    supports = np.concatenate([3 * bottom + 2, [3 * corner + 1]])
    return FeModel(
        material=material,
        loaded_nodes=_face_nodes(dims, dims[2]),
        clamped_nodes=np.array([node_index(dims, 0, 0, 0)]),
        total_load=(0.0, 0.0, -load_n),
        support_dofs=supports,
    )


def _clamped_model(material: MaterialField, load_n: float = 400.0) -> FeModel:
    dims = material.dims
    return FeModel(
        material=material,
        loaded_nodes=_face_nodes(dims, dims[2]),
        clamped_nodes=_face_nodes(dims, 0),
        total_load=(0.0, 0.0, -load_n),
    )


def test_reference_stiffness_is_symmetric_with_rigid_null_space():
    ke = reference_stiffness((1.0, 1.0, 1.0), 0.3)
    assert np.allclose(ke, ke.T)
    for axis in range(3):
        translation = np.zeros(24)
        translation[axis::3] = 1.0
        assert np.allclose(ke @ translation, 0.0, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(ke) > -1e-12)


def test_von_mises_of_simple_states():
    uniaxial = np.zeros((1, 3, 3))
    uniaxial[0, 2, 2] = -3.3
    shear = np.zeros((1, 3, 3))
    shear[0, 0, 1] = shear[0, 1, 0] = 2.0
    assert von_mises(uniaxial)[0] == pytest.approx(3.3)
    assert von_mises(shear)[0] == pytest.approx(2.0 * np.sqrt(3.0))


def test_block_under_roller_supports_matches_axial_stiffness():
    model = _roller_model(block_material())
    result = assemble_and_solve(model)
    mean = face_mean_displacement(model, result.displacement, model.loaded_nodes)
    expected = 400.0 * 10.0 / (100.0 * 1000.0)
    assert -mean[2] == pytest.approx(expected, rel=0.01)


def test_roller_reactions_balance_the_applied_load():
    result = assemble_and_solve(_roller_model(block_material()), tol=1e-10)
    total = result.reactions.sum(axis=0)
    assert np.max(np.abs(total - [0.0, 0.0, 400.0])) <= 1e-6 * 400.0


def test_clamped_block_is_stiffer_than_free_lateral_expansion():
    model = _clamped_model(block_material())
    result = assemble_and_solve(model)
    mean = face_mean_displacement(model, result.displacement, model.loaded_nodes)
    free = 400.0 * 10.0 / (100.0 * 1000.0)
    assert 0.7 * free < -mean[2] < 1.02 * free


def test_reactions_balance_the_applied_load():
    result = assemble_and_solve(_clamped_model(block_material()), tol=1e-10)
    assert np.allclose(result.reactions.sum(axis=0), [0.0, 0.0, 400.0], atol=1e-6)
    assert result.summary()["reaction_sum_n"][2] == pytest.approx(400.0, abs=1e-6)


def test_converged_residual_meets_tolerance():
    model = _clamped_model(block_material(dims=(6, 6, 6)))
    result = assemble_and_solve(model, tol=1e-8)
    assert result.stats.converged
    assert result.stats.relative_residual <= 1e-8

    f = model.force_vector()
    residual = StiffnessOperator(model).matvec(result.displacement.ravel()) - f
    free = np.ones(model.dof_count, dtype=bool)
    free[model.constrained_dofs] = False
    assert np.linalg.norm(residual[free]) <= 1e-7 * np.linalg.norm(f[free])


def test_rigid_translation_produces_no_stress():
    model = _clamped_model(block_material(dims=(3, 3, 3)))
    shift = np.tile([0.2, -0.1, 0.05], model.dof_count // 3)
    fields = recover_stress_strain(model, shift)
    assert np.allclose(fields.strain, 0.0, atol=1e-14)
    assert np.allclose(fields.von_mises, 0.0, atol=1e-10)


def test_matrix_free_solution_matches_dense_reference():
    moduli = np.linspace(200.0, 2000.0, 64).reshape((4, 4, 4))
    model = _clamped_model(block_material(dims=(4, 4, 4), modulus=moduli))
    iterative = assemble_and_solve(model, tol=1e-12).displacement
    dense = dense_reference_solve(model)
    assert np.max(np.abs(iterative - dense)) <= 1e-6 * np.max(np.abs(dense))


def test_zero_load_gives_zero_displacement():
    result = assemble_and_solve(_clamped_model(block_material(dims=(3, 3, 3)), load_n=0.0))
    assert result.stats.iterations == 0
    assert not result.displacement.any()


def test_repeated_solves_are_bit_identical():
    model = _clamped_model(block_material(dims=(4, 4, 4)))
    first = assemble_and_solve(model).displacement
    second = assemble_and_solve(model).displacement
    assert np.array_equal(first, second)


def _node_coordinates(dims, spacing=(1.0, 1.0, 1.0)):
    nx, ny, _ = dims
    ids = np.arange(node_count(dims))
    i = ids % (nx + 1)
    j = (ids // (nx + 1)) % (ny + 1)
    k = ids // ((nx + 1) * (ny + 1))
    return np.column_stack([i, j, k]) * np.asarray(spacing)


def _graded_material():
    return block_material(dims=(4, 4, 4), modulus=np.linspace(200.0, 2000.0, 64).reshape((4, 4, 4)))


def test_displacement_is_linear_in_the_load():
    single = assemble_and_solve(_clamped_model(_graded_material(), load_n=400.0), tol=1e-10).displacement
    double = assemble_and_solve(_clamped_model(_graded_material(), load_n=800.0), tol=1e-10).displacement
    assert np.max(np.abs(double - 2.0 * single)) <= 1e-9 * np.max(np.abs(single))


def test_stiffer_bone_displaces_proportionally_less():
    base = _graded_material()
    stiffer = block_material(dims=(4, 4, 4), modulus=base.modulus * 3.0)
    soft = assemble_and_solve(_clamped_model(base), tol=1e-12).displacement
    stiff = assemble_and_solve(_clamped_model(stiffer), tol=1e-12).displacement
    assert np.max(np.abs(stiff - soft / 3.0)) <= 1e-8 * np.max(np.abs(soft))


def test_work_done_by_the_load_is_positive():
    model = _clamped_model(_graded_material())
    u = assemble_and_solve(model).displacement.ravel()
    assert u @ model.force_vector() > 0


def test_uniaxial_stretch_gives_exact_axial_strain():
    model = _clamped_model(block_material(dims=(3, 3, 4), spacing=(1.0, 1.0, 0.5)))
    coords = _node_coordinates(model.material.dims, model.material.spacing)
    u = np.zeros_like(coords)
    u[:, 2] = 2e-3 * coords[:, 2]
    fields = recover_stress_strain(model, u.ravel())
    assert np.allclose(fields.strain[:, 2, 2], 2e-3, rtol=1e-12)
    off_axis = fields.strain.copy()
    off_axis[:, 2, 2] = 0.0
    assert np.allclose(off_axis, 0.0, atol=1e-15)


def test_small_rotation_produces_no_strain():
    model = _clamped_model(block_material(dims=(3, 3, 3)))
    coords = _node_coordinates(model.material.dims)
    rotation = Rotation.from_rotvec(1e-6 * np.array([1.0, -2.0, 0.5]) / np.sqrt(5.25))
    u = rotation.apply(coords) - coords
    fields = recover_stress_strain(model, u.ravel())
    assert np.max(np.abs(fields.strain)) < 1e-8


def test_all_cortical_model_has_no_cancellous_extrema():
    dims = (3, 3, 3)
    material = MaterialField(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        origin=(0.0, 0.0, 0.0),
        material_class=np.full(dims, MaterialClass.CORTICAL, dtype=np.uint8),
        modulus=np.full(dims, 12000.0),
    )
    result = assemble_and_solve(_clamped_model(material))
    with pytest.raises(DomainError, match="no cancellous"):
        cancellous_extrema(result, material)


def test_unanchored_component_is_reported():
    dims = (6, 4, 4)
    classes = np.full(dims, MaterialClass.CANCELLOUS, dtype=np.uint8)
    classes[3, :, :] = MaterialClass.VOID
    material = MaterialField(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        origin=(0.0, 0.0, 0.0),
        material_class=classes,
        modulus=np.full(dims, 1000.0),
    )
    i, j = np.meshgrid(np.arange(4), np.arange(5), indexing="ij")
    model = FeModel(
        material=material,
        loaded_nodes=np.unique(node_index(dims, i.ravel(), j.ravel(), 4)),
        clamped_nodes=np.unique(node_index(dims, i.ravel(), j.ravel(), 0)),
    )
    with pytest.raises(DisconnectedMeshError) as info:
        assemble_and_solve(model)
    assert info.value.element_count == 2 * 4 * 4


def test_iteration_cap_raises_solver_error_with_stats():
    with pytest.raises(SolverError) as info:
        assemble_and_solve(_clamped_model(block_material(dims=(4, 4, 4))), max_iter=1)
    assert info.value.stats is not None
    assert info.value.stats.iterations == 1
    assert not info.value.stats.converged


@pytest.mark.parametrize("tol", [0.0, 1e-3, -1e-8])
def test_tolerance_out_of_range(tol):
    with pytest.raises(DomainError):
        assemble_and_solve(_clamped_model(block_material(dims=(2, 2, 2))), tol=tol)


def test_model_rejects_bad_node_sets():
    material = block_material(dims=(2, 2, 2))
    top = _face_nodes((2, 2, 2), 2)
    bottom = _face_nodes((2, 2, 2), 0)
    with pytest.raises(ModelError):
        FeModel(material=material, loaded_nodes=np.array([], dtype=int), clamped_nodes=bottom)
    with pytest.raises(ModelError):
        FeModel(material=material, loaded_nodes=top, clamped_nodes=np.array([], dtype=int))
    with pytest.raises(ModelError):
        FeModel(material=material, loaded_nodes=top, clamped_nodes=top)


def test_model_rejects_nodes_without_solid_elements():
    dims = (2, 2, 2)
    classes = np.full(dims, MaterialClass.CANCELLOUS, dtype=np.uint8)
    classes[:, :, 1] = MaterialClass.VOID
    material = MaterialField(
        dims=dims,
        spacing=(1.0, 1.0, 1.0),
        origin=(0.0, 0.0, 0.0),
        material_class=classes,
        modulus=np.full(dims, 1000.0),
    )
    with pytest.raises(ModelError, match="touch no solid element"):
        FeModel(material=material, loaded_nodes=_face_nodes(dims, 2), clamped_nodes=_face_nodes(dims, 0))


def test_force_vector_splits_load_evenly():
    model = _clamped_model(block_material(dims=(2, 2, 2)))
    f = model.force_vector().reshape(-1, 3)
    assert np.allclose(f[model.loaded_nodes], [0.0, 0.0, -400.0 / 9.0])
    assert f.sum(axis=0) == pytest.approx([0.0, 0.0, -400.0])


def test_phantom_with_screw_end_to_end(small_phantom_spec):
    vol = generate_phantom(small_phantom_spec)
    traj = Trajectory.straight((1.0, 11.0, 9.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length_mm=20.0)
    screw = ScrewSpec(length_mm=20.0)
    material = build_material_field(vol, swept_screw_voxels(traj, screw, vol))
    model = build_model(material, traj, screw, load_n=400.0)

    top_layer = model.loaded_nodes // (33 * 23)
    assert np.all(top_layer == 17)
    assert len(model.clamped_nodes) > 0

    result = assemble_and_solve(model)
    assert np.allclose(result.reactions.sum(axis=0), [0.0, 0.0, 400.0], atol=1e-3)
    extrema = cancellous_extrema(result, material)
    assert np.isfinite(extrema.max_von_mises_mpa) and extrema.max_von_mises_mpa > 0
    assert np.isfinite(extrema.max_principal_strain) and extrema.max_principal_strain > 0
    assert material.material_class[extrema.von_mises_voxel] == MaterialClass.CANCELLOUS


def test_rigid_screw_clamps_every_screw_node(small_phantom_spec):
    vol = generate_phantom(small_phantom_spec)
    traj = Trajectory.straight((1.0, 11.0, 9.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length_mm=20.0)
    screw = ScrewSpec(length_mm=20.0)
    material = build_material_field(vol, swept_screw_voxels(traj, screw, vol))
    screw_nodes = np.unique(element_nodes(material.dims, np.argwhere(material.material_class == MaterialClass.SCREW)))

    rigid = build_model(material, traj, screw)
    assert np.array_equal(rigid.clamped_nodes, screw_nodes)

    flexible = build_model(material, traj, screw, rigid_screw=False)
    assert np.isin(flexible.clamped_nodes, screw_nodes).all()
    assert len(flexible.clamped_nodes) < len(screw_nodes)
    assert np.max(flexible.clamped_nodes % 33) <= 2


def test_build_model_needs_screw_voxels():
    material = block_material(dims=(4, 4, 4))
    traj = Trajectory.straight((0.0, 2.0, 2.0), (1.0, 0.0, 0.0), (0.0, 0.0, 1.0), length_mm=3.0)
    with pytest.raises(ModelError):
        build_model(material, traj, ScrewSpec(length_mm=3.0))
