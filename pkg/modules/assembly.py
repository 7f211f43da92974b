"""
Module 2: Finite Element Assembly
Assembles the bilinear forms of the weak GPE problem over the interior dofs:
stiffness (grad u, grad v), mass (u, v), potential (W u, v) and the frozen-density
nonlinear term zeta (w^2 u, v). Quadrature-based terms use a 6-point rule that is
exact for polynomials of degree 4, so every assembled matrix is exact for P1.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.sparse as sp

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from modules.mesh import Mesh, L_SHAPE, UNIT_SQUARE
from utils.errors import AssemblyError, ConfigError


SparseMatrix = sp.csr_matrix


@dataclass(frozen=True)
class ProblemSpec:
    """Potential W(x) = gamma_1 x_1^2 + gamma_2 x_2^2, interaction zeta, domain tag."""
    domain: str = UNIT_SQUARE
    gamma: Tuple[float, ...] = (1.0, 1.0)
    zeta: float = 1.0

    def __post_init__(self):
        if self.domain not in (UNIT_SQUARE, L_SHAPE):
            raise ConfigError("domain", f"unknown domain '{self.domain}'")
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if len(self.gamma) != 2 or any(not np.isfinite(g) or g <= 0.0 for g in self.gamma):
            raise ConfigError("gamma", f"two positive coefficients required, got {self.gamma}")
        if not np.isfinite(self.zeta) or self.zeta < 0.0:
            raise ConfigError("zeta", f"interaction strength must be >= 0, got {self.zeta}")

    def potential(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        return self.gamma[0] * x1 ** 2 + self.gamma[1] * x2 ** 2

    def to_dict(self) -> dict:
        return {"domain": self.domain, "gamma": list(self.gamma), "zeta": self.zeta}


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points and weights on the reference triangle (weights sum to 1/2)."""
    points: np.ndarray    # (Q, 3)
    weights: np.ndarray   # (Q,)
    degree: int


def _degree4_rule() -> QuadratureRule:
    # Symmetric 6-point rule, exact up to degree 4
    a1 = 0.445948490915964886318
    w1 = 0.223381589678011065756
    a2 = 0.091576213509770743460
    w2 = 1.0 / 3.0 - w1
    b1, b2 = 1.0 - 2.0 * a1, 1.0 - 2.0 * a2
    points = np.array([
        [b1, a1, a1], [a1, b1, a1], [a1, a1, b1],
        [b2, a2, a2], [a2, b2, a2], [a2, a2, b2],
    ])
    weights = 0.5 * np.array([w1, w1, w1, w2, w2, w2])
    return QuadratureRule(points=points, weights=weights, degree=4)


DEGREE4_RULE = _degree4_rule()


@dataclass
class FeFunction:
    """Coefficients of a P1 function over the interior dofs of one level."""
    level_id: int
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.ndim != 1:
            raise AssemblyError(f"coefficient vector must be 1-D, got shape {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise AssemblyError("coefficient vector contains non-finite entries")

    def __len__(self):
        return len(self.coeffs)


# ---------------------------------------------------------------------------
# Element data
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ElementData:
    """Per-triangle geometry shared by every assembly routine of a mesh."""
    mesh: Mesh
    areas: np.ndarray        # (T,)
    gradients: np.ndarray    # (T, 3, 2) gradients of the barycentric coordinates
    quad_points: np.ndarray  # (T, Q, 2) physical quadrature points
    rule: QuadratureRule
    rows: np.ndarray = field(repr=False)   # (T*9,) interior dof row of each local entry, -1 on boundary
    cols: np.ndarray = field(repr=False)


def element_data(mesh: Mesh, rule: QuadratureRule = DEGREE4_RULE) -> ElementData:
    """
    Compute areas, barycentric gradients and quadrature points of every triangle.

    Raises:
        AssemblyError: on a zero-area (or inverted) triangle, naming its index
    """
    t = mesh.triangles
    a, b, c = (mesh.vertices[t[:, i]] for i in range(3))
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    bad = np.flatnonzero(det <= 0.0)
    if len(bad):
        raise AssemblyError(f"degenerate triangle {int(bad[0])} (signed area {0.5 * det[bad[0]]:.3e})",
                            element=int(bad[0]))
    grads = np.empty((len(t), 3, 2))
    grads[:, 0, 0] = b[:, 1] - c[:, 1]
    grads[:, 0, 1] = c[:, 0] - b[:, 0]
    grads[:, 1, 0] = c[:, 1] - a[:, 1]
    grads[:, 1, 1] = a[:, 0] - c[:, 0]
    grads[:, 2, 0] = a[:, 1] - b[:, 1]
    grads[:, 2, 1] = b[:, 0] - a[:, 0]
    grads /= det[:, None, None]
    corners = np.stack([a, b, c], axis=1)
    quad_points = np.einsum('qi,tid->tqd', rule.points, corners)

    dofs = mesh.free_dof_map[t]
    rows = np.repeat(dofs, 3, axis=1).ravel()
    cols = np.tile(dofs, (1, 3)).ravel()
    return ElementData(mesh=mesh, areas=0.5 * det, gradients=grads, quad_points=quad_points,
                       rule=rule, rows=rows, cols=cols)


def _to_global(data: ElementData, local: np.ndarray, full: bool = False) -> SparseMatrix:
    """Sum (T, 3, 3) local matrices into a CSR matrix over interior dofs (or all vertices)."""
    mesh = data.mesh
    values = local.reshape(-1)
    if full:
        t = mesh.triangles
        rows = np.repeat(t, 3, axis=1).ravel()
        cols = np.tile(t, (1, 3)).ravel()
        n = mesh.n_vertices
        return sp.coo_matrix((values, (rows, cols)), shape=(n, n)).tocsr()
    keep = (data.rows >= 0) & (data.cols >= 0)
    n = mesh.n_dofs
    return sp.coo_matrix((values[keep], (data.rows[keep], data.cols[keep])), shape=(n, n)).tocsr()


def _quadrature_local(data: ElementData, weight_values: np.ndarray) -> np.ndarray:
    """Local matrices of int_K f phi_i phi_j given f at the quadrature points, shape (T, 3, 3)."""
    rule = data.rule
    return 2.0 * data.areas[:, None, None] * np.einsum(
        'q,tq,qi,qj->tij', rule.weights, weight_values, rule.points, rule.points)


# ---------------------------------------------------------------------------
# Bilinear forms
# ---------------------------------------------------------------------------

def local_stiffness(data: ElementData) -> np.ndarray:
    return data.areas[:, None, None] * np.einsum('tid,tjd->tij', data.gradients, data.gradients)


def local_mass(data: ElementData) -> np.ndarray:
    pattern = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    return data.areas[:, None, None] * pattern[None, :, :]


def assemble_stiffness(mesh: Mesh, full: bool = False, data: Optional[ElementData] = None) -> SparseMatrix:
    """
    Assemble (grad phi_i, grad phi_j).

    Args:
        mesh: Conforming mesh
        full: Keep boundary rows/columns (before Dirichlet elimination)
        data: Precomputed element data

    Returns:
        Symmetric positive definite CSR matrix over the interior dofs
    """
    data = data or element_data(mesh)
    return _to_global(data, local_stiffness(data), full)


def assemble_mass(mesh: Mesh, full: bool = False, data: Optional[ElementData] = None) -> SparseMatrix:
    """Assemble (phi_i, phi_j) exactly; local block is |K|/12 [[2,1,1],[1,2,1],[1,1,2]]."""
    data = data or element_data(mesh)
    return _to_global(data, local_mass(data), full)


def assemble_potential(
    mesh: Mesh,
    spec: ProblemSpec,
    full: bool = False,
    data: Optional[ElementData] = None,
    potential: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
) -> SparseMatrix:
    """
    Assemble (W phi_i, phi_j) with W evaluated analytically at the quadrature points.

    Args:
        mesh: Conforming mesh
        spec: Problem specification providing W
        full: Keep boundary rows/columns
        data: Precomputed element data
        potential: Override for W(x1, x2), used to check scaling identities

    Returns:
        Symmetric positive semidefinite CSR matrix
    """
    data = data or element_data(mesh)
    func = potential or spec.potential
    qp = data.quad_points
    values = np.asarray(func(qp[..., 0], qp[..., 1]), dtype=float) * np.ones(qp.shape[:2])
    return _to_global(data, _quadrature_local(data, values), full)


def _vertex_values(mesh: Mesh, w: Union[FeFunction, np.ndarray, None], full_values: Optional[np.ndarray]) -> np.ndarray:
    if full_values is not None:
        full_values = np.asarray(full_values, dtype=float)
        if full_values.shape != (mesh.n_vertices,):
            raise AssemblyError(f"full vertex vector must have length {mesh.n_vertices}")
        return full_values
    if isinstance(w, FeFunction):
        if w.level_id != mesh.level_id:
            raise AssemblyError(f"function lives on level {w.level_id}, mesh is level {mesh.level_id}")
        coeffs = w.coeffs
    else:
        coeffs = np.asarray(w, dtype=float)
    if coeffs.shape != (mesh.n_dofs,):
        raise AssemblyError(f"expected {mesh.n_dofs} coefficients, got {coeffs.shape}")
    return mesh.expand(coeffs)


def assemble_nonlinear(
    mesh: Mesh,
    w: Union[FeFunction, np.ndarray, None],
    zeta: float,
    full: bool = False,
    data: Optional[ElementData] = None,
    full_values: Optional[np.ndarray] = None
) -> SparseMatrix:
    """
    Assemble N(w)_ij = zeta (w^2 phi_i, phi_j) for a frozen density w^2.

    Args:
        mesh: Conforming mesh
        w: Function on the mesh level (FeFunction or interior coefficients)
        zeta: Interaction strength
        full: Keep boundary rows/columns
        data: Precomputed element data
        full_values: Vertex values including the boundary (overrides w)

    Returns:
        Symmetric positive semidefinite CSR matrix
    """
    data = data or element_data(mesh)
    values = _vertex_values(mesh, w, full_values)
    at_quad = np.einsum('qi,ti->tq', data.rule.points, values[mesh.triangles])
    return _to_global(data, _quadrature_local(data, zeta * at_quad ** 2), full)


# ---------------------------------------------------------------------------
# Operators on one level
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class OperatorParts:
    """Stiffness, potential and mass of one level plus the nonlinear assembler."""
    mesh: Mesh
    spec: ProblemSpec
    data: ElementData
    stiffness: SparseMatrix
    potential: SparseMatrix
    mass: SparseMatrix
    linear: SparseMatrix = field(init=False)

    def __post_init__(self):
        self.linear = (self.stiffness + self.potential).tocsr()

    @classmethod
    def build(cls, mesh: Mesh, spec: ProblemSpec) -> "OperatorParts":
        data = element_data(mesh)
        return cls(mesh=mesh, spec=spec, data=data,
                   stiffness=assemble_stiffness(mesh, data=data),
                   potential=assemble_potential(mesh, spec, data=data),
                   mass=assemble_mass(mesh, data=data))

    @property
    def level_id(self) -> int:
        return self.mesh.level_id

    @property
    def n_dofs(self) -> int:
        return self.mesh.n_dofs

    def nonlinear(self, w: Union[FeFunction, np.ndarray]) -> SparseMatrix:
        return assemble_nonlinear(self.mesh, w, self.spec.zeta, data=self.data)

    def operator(self, w: Union[FeFunction, np.ndarray]) -> SparseMatrix:
        """A_stiff + A_W + N(w)."""
        if self.spec.zeta == 0.0:
            return self.linear
        return (self.linear + self.nonlinear(w)).tocsr()


def _coeffs(u: Union[FeFunction, np.ndarray]) -> np.ndarray:
    return u.coeffs if isinstance(u, FeFunction) else np.asarray(u, dtype=float)


def apply_operator(parts: OperatorParts, u: Union[FeFunction, np.ndarray]) -> FeFunction:
    """(A_stiff + A_W + N(u)) u on the level of parts."""
    if isinstance(u, FeFunction) and u.level_id != parts.level_id:
        raise AssemblyError(f"function lives on level {u.level_id}, operators on level {parts.level_id}")
    x = _coeffs(u)
    return FeFunction(parts.level_id, parts.operator(x) @ x)


def rayleigh(u: Union[FeFunction, np.ndarray], parts: OperatorParts, mass: Optional[SparseMatrix] = None) -> float:
    """
    Nonlinear Rayleigh quotient u^T (A_stiff + A_W + N(u)) u / u^T M u.

    Raises:
        AssemblyError: for a zero vector
    """
    x = _coeffs(u)
    mass = parts.mass if mass is None else mass
    denom = float(x @ (mass @ x))
    if denom <= 0.0:
        raise AssemblyError("Rayleigh quotient of a zero vector")
    return float(x @ apply_operator(parts, u).coeffs) / denom


def energy(u: Union[FeFunction, np.ndarray], parts: OperatorParts) -> float:
    """GPE energy u^T (A_stiff + A_W) u + 1/2 u^T N(u) u."""
    x = _coeffs(u)
    value = float(x @ (parts.linear @ x))
    if parts.spec.zeta:
        value += 0.5 * float(x @ (parts.nonlinear(x) @ x))
    return value


def dump_matrix(matrix: sp.spmatrix, path: str):
    """Write 'i j value' lines sorted by (i, j)."""
    coo = sp.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, 'w', encoding='utf-8') as f:
        for i, j, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            f.write(f"{int(i)} {int(j)} {v:.17g}\n")


# Test
if __name__ == "__main__":
    from modules.mesh import build_unit_square

    mesh = build_unit_square(4)
    parts = OperatorParts.build(mesh, ProblemSpec())
    u = mesh.interpolate(lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y))
    print(f"dofs: {mesh.n_dofs}, nnz(K): {parts.stiffness.nnz}")
    print(f"Rayleigh quotient of the interpolated sine: {rayleigh(u, parts):.6f}")
