"""Voxel finite elements for small-strain linear elasticity.

Every non-void voxel is an 8-node trilinear hexahedron. Nodes are numbered
lexicographically, x fastest: node (i, j, k) -> i + (nx + 1) * (j + (ny + 1) * k),
and node n carries dofs 3n, 3n + 1, 3n + 2. Units are mm, N and MPa.

The stiffness operator is applied matrix-free from one reference element matrix
(unit modulus) scaled by each element's modulus. Scatter uses ``np.bincount``,
which accumulates in a fixed order, so repeated solves are bit-identical.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import ndimage, sparse

from app.errors import DisconnectedMeshError, DomainError, ModelError, SolverError, SolverStats
from app.trajectory import ScrewSpec, Trajectory, voxel_centers
from app.volume import MaterialClass, MaterialField

logger = logging.getLogger(__name__)

DEFAULT_LOAD_N = 400.0
DEFAULT_TOL = 1e-8

# Local node order of the reference hexahedron, as (di, dj, dk) offsets.
HEX_NODE_OFFSETS = np.array(
    [
        [0, 0, 0],
        [1, 0, 0],
        [1, 1, 0],
        [0, 1, 0],
        [0, 0, 1],
        [1, 0, 1],
        [1, 1, 1],
        [0, 1, 1],
    ],
    dtype=np.int64,
)
_NATURAL_SIGNS = 2.0 * HEX_NODE_OFFSETS - 1.0


def elasticity_matrix(modulus: float, poisson: float) -> np.ndarray:
    """Isotropic Hooke's law in Voigt order (xx, yy, zz, xy, yz, zx), engineering shear."""
    lam = modulus * poisson / ((1.0 + poisson) * (1.0 - 2.0 * poisson))
    mu = modulus / (2.0 * (1.0 + poisson))
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[np.arange(3), np.arange(3)] += 2.0 * mu
    d[np.arange(3, 6), np.arange(3, 6)] = mu
    return d


def _strain_displacement(spacing: tuple[float, float, float], xi: np.ndarray) -> np.ndarray:
    """B matrix (6 x 24) at natural coordinates ``xi`` of a brick with edge lengths ``spacing``."""
    signs = _NATURAL_SIGNS
    factors = 1.0 + signs * xi  # (8, 3)
    grads = np.empty((8, 3))
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        grads[:, axis] = (
            signs[:, axis] * factors[:, others[0]] * factors[:, others[1]] / 8.0
        ) * (2.0 / spacing[axis])
    b = np.zeros((6, 24))
    dx, dy, dz = grads.T
    columns = 3 * np.arange(8)
    b[0, columns] = dx
    b[1, columns + 1] = dy
    b[2, columns + 2] = dz
    b[3, columns] = dy
    b[3, columns + 1] = dx
    b[4, columns + 1] = dz
    b[4, columns + 2] = dy
    b[5, columns] = dz
    b[5, columns + 2] = dx
    return b


@lru_cache(maxsize=16)
def reference_stiffness(spacing: tuple[float, float, float], poisson: float) -> np.ndarray:
    """Element stiffness for unit modulus, 2x2x2 Gauss quadrature."""
    d = elasticity_matrix(1.0, poisson)
    jacobian_det = math.prod(spacing) / 8.0
    gauss = 1.0 / math.sqrt(3.0)
    ke = np.zeros((24, 24))
    for signs in _NATURAL_SIGNS:
        b = _strain_displacement(spacing, gauss * signs)
        ke += b.T @ d @ b * jacobian_det
    ke = 0.5 * (ke + ke.T)
    ke.setflags(write=False)
    return ke


@lru_cache(maxsize=16)
def centroid_strain_displacement(spacing: tuple[float, float, float]) -> np.ndarray:
    # Average of the Gauss-point B matrices equals B at the centroid for trilinear bricks.
    b = _strain_displacement(spacing, np.zeros(3))
    b.setflags(write=False)
    return b


def node_index(dims: tuple[int, int, int], i, j, k):
    nx, ny, _ = dims
    return i + (nx + 1) * (j + (ny + 1) * k)


def node_count(dims: tuple[int, int, int]) -> int:
    return math.prod(n + 1 for n in dims)


def node_coordinates(material: MaterialField, nodes: np.ndarray) -> np.ndarray:
    nx, ny, _ = material.dims
    nodes = np.asarray(nodes, dtype=np.int64)
    i = nodes % (nx + 1)
    j = (nodes // (nx + 1)) % (ny + 1)
    k = nodes // ((nx + 1) * (ny + 1))
    return np.asarray(material.origin) + np.column_stack([i, j, k]) * np.asarray(material.spacing)


def element_voxels(material: MaterialField) -> np.ndarray:
    """(n, 3) voxel indices of non-void elements, x-fastest."""
    flat = np.flatnonzero(material.material_class.ravel(order="F") != MaterialClass.VOID)
    return np.column_stack(np.unravel_index(flat, material.dims, order="F")).astype(np.int64)


def element_nodes(dims: tuple[int, int, int], voxels: np.ndarray) -> np.ndarray:
    corners = voxels[:, None, :] + HEX_NODE_OFFSETS[None, :, :]
    return node_index(dims, corners[..., 0], corners[..., 1], corners[..., 2])


def _element_dofs(nodes: np.ndarray) -> np.ndarray:
    return (3 * nodes[:, :, None] + np.arange(3)[None, None, :]).reshape(len(nodes), 24)


@dataclass(frozen=True, eq=False)
class FeModel:
    material: MaterialField
    loaded_nodes: np.ndarray
    clamped_nodes: np.ndarray
    total_load: tuple[float, float, float] = (0.0, 0.0, -DEFAULT_LOAD_N)
    support_dofs: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    voxels: np.ndarray = field(init=False, repr=False)
    element_node_ids: np.ndarray = field(init=False, repr=False)
    element_modulus: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        loaded = np.unique(np.asarray(self.loaded_nodes, dtype=np.int64))
        clamped = np.unique(np.asarray(self.clamped_nodes, dtype=np.int64))
        supports = np.unique(np.asarray(self.support_dofs, dtype=np.int64))
        if loaded.size == 0:
            raise ModelError("loaded node set is empty")
        if clamped.size == 0:
            raise ModelError("clamped node set is empty")
        if np.intersect1d(loaded, clamped).size:
            raise ModelError("loaded and clamped node sets overlap")
        voxels = element_voxels(self.material)
        if voxels.size == 0:
            raise ModelError("material field has no non-void elements")
        nodes = element_nodes(self.material.dims, voxels)
        used = np.unique(nodes)
        for name, node_set in (("loaded", loaded), ("clamped", clamped)):
            orphans = np.setdiff1d(node_set, used)
            if orphans.size:
                raise ModelError(f"{orphans.size} {name} node(s) touch no solid element, first {orphans[0]}")
        for name, value in (
            ("loaded_nodes", loaded),
            ("clamped_nodes", clamped),
            ("support_dofs", supports),
            ("voxels", voxels),
            ("element_node_ids", nodes),
            ("element_modulus", self.material.modulus[tuple(voxels.T)].astype(np.float64)),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "total_load", tuple(float(v) for v in self.total_load))

    @property
    def dof_count(self) -> int:
        return 3 * node_count(self.material.dims)

    @property
    def constrained_dofs(self) -> np.ndarray:
        clamped = (3 * self.clamped_nodes[:, None] + np.arange(3)).ravel()
        return np.union1d(clamped, self.support_dofs)

    def force_vector(self) -> np.ndarray:
        f = np.zeros(self.dof_count)
        share = np.asarray(self.total_load) / len(self.loaded_nodes)
        for axis in range(3):
            f[3 * self.loaded_nodes + axis] = share[axis]
        return f


class ElementFields(NamedTuple):
    strain: np.ndarray
    stress: np.ndarray
    von_mises: np.ndarray
    max_principal_strain: np.ndarray


@dataclass(frozen=True, eq=False)
class FeResult:
    displacement: np.ndarray
    voxels: np.ndarray
    element_strain: np.ndarray
    element_stress: np.ndarray
    von_mises: np.ndarray
    max_principal_strain: np.ndarray
    reaction_nodes: np.ndarray
    reactions: np.ndarray
    stats: SolverStats

    def summary(self) -> dict:
        return {
            "element_count": int(len(self.voxels)),
            "max_von_mises_mpa": float(self.von_mises.max()),
            "max_principal_strain": float(self.max_principal_strain.max()),
            "reaction_sum_n": [float(v) for v in self.reactions.sum(axis=0)],
            "solver": self.stats.as_dict(),
        }


class CancellousExtrema(NamedTuple):
    max_von_mises_mpa: float
    max_principal_strain: float
    von_mises_voxel: tuple[int, int, int]
    strain_voxel: tuple[int, int, int]


class StiffnessOperator:
    """Matrix-free K for a model; ``matvec`` works on full-length dof vectors."""

    def __init__(self, model: FeModel) -> None:
        self.dof_count = model.dof_count
        self.element_dofs = _element_dofs(model.element_node_ids)
        self.reference = reference_stiffness(model.material.spacing, model.material.poisson)
        self.modulus = model.element_modulus
        self._flat_dofs = self.element_dofs.ravel()

    def matvec(self, u: np.ndarray) -> np.ndarray:
        element_forces = (u[self.element_dofs] @ self.reference) * self.modulus[:, None]
        return np.bincount(self._flat_dofs, weights=element_forces.ravel(), minlength=self.dof_count)

    def diagonal(self) -> np.ndarray:
        weights = np.outer(self.modulus, np.diag(self.reference))
        return np.bincount(self._flat_dofs, weights=weights.ravel(), minlength=self.dof_count)


def assemble_stiffness_matrix(model: FeModel) -> sparse.csr_matrix:
    """Explicit sparse K, for diagnostics and small reference solves."""
    operator = StiffnessOperator(model)
    dofs = operator.element_dofs
    rows = np.repeat(dofs, 24, axis=1).ravel()
    cols = np.tile(dofs, (1, 24)).ravel()
    values = (operator.modulus[:, None, None] * operator.reference[None, :, :]).ravel()
    return sparse.coo_matrix((values, (rows, cols)), shape=(model.dof_count,) * 2).tocsr()


DENSE_REFERENCE_MAX_DOFS = 20_000


def dense_reference_solve(model: FeModel) -> np.ndarray:
    """Direct solve of the same constrained system, returned as an (n, 3) displacement."""
    stiffness = assemble_stiffness_matrix(model)
    free = stiffness.diagonal() > 0
    free[model.constrained_dofs] = False
    free_dofs = np.flatnonzero(free)
    if free_dofs.size > DENSE_REFERENCE_MAX_DOFS:
        raise ModelError(
            f"dense reference solve limited to {DENSE_REFERENCE_MAX_DOFS} free dofs, got {free_dofs.size}"
        )
    reduced = stiffness[free_dofs][:, free_dofs].toarray()
    u = np.zeros(model.dof_count)
    u[free_dofs] = np.linalg.solve(reduced, model.force_vector()[free_dofs])
    return u.reshape(-1, 3)


def _top_face_nodes(material: MaterialField) -> np.ndarray:
    solid = material.material_class != MaterialClass.VOID
    layers = np.flatnonzero(solid.any(axis=(0, 1)))
    if layers.size == 0:
        raise ModelError("no solid voxels, superior endplate is empty")
    top = int(layers[-1])
    i, j = np.nonzero(solid[:, :, top])
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
    ii = (i[:, None] + corners[None, :, 0]).ravel()
    jj = (j[:, None] + corners[None, :, 1]).ravel()
    return np.unique(node_index(material.dims, ii, jj, top + 1))


def build_model(
    material: MaterialField,
    traj: Trajectory,
    screw: ScrewSpec,
    load_n: float = DEFAULT_LOAD_N,
    rigid_screw: bool = True,
) -> FeModel:
    """Uniform endplate load on the superior face, screw clamped at its head.

    A rigid screw clamped at one end cannot move, so by default every screw node
    is fixed and the bone hangs on the whole implant. With ``rigid_screw=False``
    only the nodes of the screw voxels within one layer of the entry face are
    clamped and the screw deforms with its own modulus.
    """
    if screw.length_mm > traj.total_length_mm:
        raise ModelError("screw is longer than its trajectory")
    loaded = _top_face_nodes(material)

    screw_voxels = np.argwhere(material.material_class == MaterialClass.SCREW)
    if screw_voxels.size == 0:
        raise ModelError("no screw voxels, nothing to clamp")
    axial = (voxel_centers(material, screw_voxels) - np.asarray(traj.entry_mm)) @ np.asarray(traj.direction)
    entry_layer = screw_voxels[axial < min(material.spacing)]
    if entry_layer.size == 0:
        raise ModelError("screw has no voxels within one layer of its entry face")
    clamped = np.unique(element_nodes(material.dims, screw_voxels if rigid_screw else entry_layer))

    loaded = np.setdiff1d(loaded, clamped)
    logger.info(
        "fe_model_built loaded_nodes=%d clamped_nodes=%d load_n=%.1f rigid_screw=%s",
        len(loaded),
        len(clamped),
        load_n,
        rigid_screw,
    )
    return FeModel(
        material=material,
        loaded_nodes=loaded,
        clamped_nodes=clamped,
        total_load=(0.0, 0.0, -float(load_n)),
    )


def _check_connectivity(model: FeModel) -> None:
    solid = model.material.material_class != MaterialClass.VOID
    labels, component_count = ndimage.label(solid)
    if component_count <= 1:
        return
    constrained_nodes = np.unique(model.constrained_dofs // 3)
    anchored = np.isin(model.element_node_ids, constrained_nodes).any(axis=1)
    element_labels = labels[tuple(model.voxels.T)]
    anchored_labels = set(np.unique(element_labels[anchored]).tolist())
    for label in range(1, component_count + 1):
        if label not in anchored_labels:
            size = int(np.count_nonzero(element_labels == label))
            first = tuple(int(v) for v in model.voxels[element_labels == label][0])
            raise DisconnectedMeshError(
                f"solid component {label} ({size} elements, first voxel {first}) "
                "is not connected to any constrained node",
                component_label=label,
                element_count=size,
            )


def _default_max_iter(free_count: int) -> int:
    return max(1, int(math.ceil(20.0 * math.sqrt(free_count))))


def assemble_and_solve(model: FeModel, tol: float = DEFAULT_TOL, max_iter: int | None = None) -> FeResult:
    """Jacobi-preconditioned conjugate gradients on the free dofs."""
    if not 0 < tol <= 1e-4:
        raise DomainError(f"tol must be in (0, 1e-4], got {tol}")
    _check_connectivity(model)

    operator = StiffnessOperator(model)
    diagonal = operator.diagonal()
    free = diagonal > 0
    free[model.constrained_dofs] = False
    free_dofs = np.flatnonzero(free)
    max_iter = max_iter or _default_max_iter(free_dofs.size)

    f = model.force_vector()
    b = f[free_dofs]
    inverse_diagonal = 1.0 / diagonal[free_dofs]
    work = np.zeros(model.dof_count)

    def apply(x: np.ndarray) -> np.ndarray:
        work[free_dofs] = x
        return operator.matvec(work)[free_dofs]

    x = np.zeros(free_dofs.size)
    b_norm = float(np.linalg.norm(b))
    iterations = 0
    relative_residual = 0.0
    if b_norm > 0:
        r = b.copy()
        z = inverse_diagonal * r
        p = z.copy()
        rz = float(r @ z)
        relative_residual = 1.0
        while iterations < max_iter:
            q = apply(p)
            alpha = rz / float(p @ q)
            x += alpha * p
            r -= alpha * q
            iterations += 1
            relative_residual = float(np.linalg.norm(r)) / b_norm
            if relative_residual <= tol:
                break
            z = inverse_diagonal * r
            rz_next = float(r @ z)
            p = z + (rz_next / rz) * p
            rz = rz_next
            if iterations % 500 == 0:
                logger.debug("fe_cg_progress iterations=%d residual=%.3e", iterations, relative_residual)

    stats = SolverStats(
        iterations=iterations,
        relative_residual=relative_residual,
        dof_count=int(free_dofs.size),
        converged=relative_residual <= tol,
    )
    if not stats.converged:
        raise SolverError(
            f"conjugate gradients did not reach {tol:.1e} in {max_iter} iterations "
            f"(residual {relative_residual:.3e})",
            stats=stats,
        )
    logger.info(
        "fe_solve_done dofs=%d iterations=%d residual=%.3e",
        stats.dof_count,
        stats.iterations,
        stats.relative_residual,
    )

    u = np.zeros(model.dof_count)
    u[free_dofs] = x
    residual_force = operator.matvec(u) - f
    reaction_nodes = np.unique(model.constrained_dofs // 3)
    reactions = residual_force.reshape(-1, 3)[reaction_nodes]
    fields = recover_stress_strain(model, u)
    return FeResult(
        displacement=u.reshape(-1, 3),
        voxels=model.voxels,
        element_strain=fields.strain,
        element_stress=fields.stress,
        von_mises=fields.von_mises,
        max_principal_strain=fields.max_principal_strain,
        reaction_nodes=reaction_nodes,
        reactions=reactions,
        stats=stats,
    )


def _voigt_to_tensor(voigt: np.ndarray, shear_factor: float) -> np.ndarray:
    tensor = np.empty((len(voigt), 3, 3))
    tensor[:, 0, 0] = voigt[:, 0]
    tensor[:, 1, 1] = voigt[:, 1]
    tensor[:, 2, 2] = voigt[:, 2]
    for column, (a, b) in zip((3, 4, 5), ((0, 1), (1, 2), (2, 0))):
        tensor[:, a, b] = tensor[:, b, a] = shear_factor * voigt[:, column]
    return tensor


def von_mises(stress: np.ndarray) -> np.ndarray:
    sxx, syy, szz = stress[:, 0, 0], stress[:, 1, 1], stress[:, 2, 2]
    sxy, syz, szx = stress[:, 0, 1], stress[:, 1, 2], stress[:, 2, 0]
    squared = 0.5 * ((sxx - syy) ** 2 + (syy - szz) ** 2 + (szz - sxx) ** 2) + 3.0 * (
        sxy**2 + syz**2 + szx**2
    )
    return np.sqrt(np.maximum(squared, 0.0))


def recover_stress_strain(model: FeModel, displacement: np.ndarray) -> ElementFields:
    """Centroid strain, Hooke stress, von Mises and largest-magnitude principal strain per element."""
    u = np.asarray(displacement, dtype=float).ravel()
    if u.size != model.dof_count:
        raise DomainError(f"displacement has {u.size} dofs, model has {model.dof_count}")
    b = centroid_strain_displacement(model.material.spacing)
    strain_voigt = u[_element_dofs(model.element_node_ids)] @ b.T
    d = elasticity_matrix(1.0, model.material.poisson)
    stress_voigt = (strain_voigt @ d.T) * model.element_modulus[:, None]

    strain = _voigt_to_tensor(strain_voigt, 0.5)
    stress = _voigt_to_tensor(stress_voigt, 1.0)
    principal = np.linalg.eigvalsh(strain)
    return ElementFields(
        strain=strain,
        stress=stress,
        von_mises=von_mises(stress),
        max_principal_strain=np.abs(principal).max(axis=1),
    )


def cancellous_extrema(result: FeResult, material: MaterialField) -> CancellousExtrema:
    classes = material.material_class[tuple(result.voxels.T)]
    cancellous = np.flatnonzero(classes == MaterialClass.CANCELLOUS)
    if cancellous.size == 0:
        raise DomainError("model has no cancellous elements")
    stress_at = cancellous[int(np.argmax(result.von_mises[cancellous]))]
    strain_at = cancellous[int(np.argmax(result.max_principal_strain[cancellous]))]
    return CancellousExtrema(
        max_von_mises_mpa=float(result.von_mises[stress_at]),
        max_principal_strain=float(result.max_principal_strain[strain_at]),
        von_mises_voxel=tuple(int(v) for v in result.voxels[stress_at]),
        strain_voxel=tuple(int(v) for v in result.voxels[strain_at]),
    )


def face_mean_displacement(model: FeModel, displacement: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Area-weighted mean displacement over a horizontal face made of ``nodes``.

    Each node is weighted by its share of the face quads it belongs to, so the
    result is the surface average of the bilinear displacement field.
    """
    dims = model.material.dims
    nx, ny, _ = dims
    nodes = np.asarray(nodes, dtype=np.int64)
    in_face = np.zeros(node_count(dims), dtype=bool)
    in_face[nodes] = True
    weights = np.zeros(node_count(dims))
    k = nodes[0] // ((nx + 1) * (ny + 1))
    for i in range(nx):
        for j in range(ny):
            quad = node_index(dims, np.array([i, i + 1, i + 1, i]), np.array([j, j, j + 1, j + 1]), k)
            if in_face[quad].all():
                weights[quad] += 0.25
    u = np.asarray(displacement).reshape(-1, 3)
    return (weights[:, None] * u).sum(axis=0) / weights.sum()
