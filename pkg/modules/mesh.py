"""
Module 1: Meshes and Nested Refinement
Builds structured triangulations of the unit square and the L-shape, refines them
uniformly (midpoint subdivision) or adaptively (newest-vertex bisection) and
produces the prolongation maps between nested P1 spaces.

Triangle convention: for every triangle [t0, t1, t2] the vertex t0 is the newest
vertex and (t1, t2) is its refinement edge.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sp

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import BISECTION_MAX_SWEEPS
from utils.errors import MeshError


UNIT_SQUARE = "unit-square"
L_SHAPE = "l-shape"
DOMAIN_AREAS = {UNIT_SQUARE: 1.0, L_SHAPE: 3.0}

_GEOM_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Mesh:
    """A conforming triangulation with its interior-vertex numbering."""
    vertices: np.ndarray          # (V, 2)
    triangles: np.ndarray         # (T, 3), positively oriented
    boundary_flags: np.ndarray    # (V,) True on the domain boundary
    domain: str
    level_id: int = 0
    free_dof_map: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=float)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        flags = np.ascontiguousarray(self.boundary_flags, dtype=bool)
        dof_map = np.full(len(vertices), -1, dtype=np.int64)
        dof_map[~flags] = np.arange(int(np.count_nonzero(~flags)))
        for name, value in (("vertices", vertices), ("triangles", triangles),
                            ("boundary_flags", flags), ("free_dof_map", dof_map)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def free_vertices(self) -> np.ndarray:
        """Vertex indices of the interior dofs, in dof order."""
        return np.flatnonzero(~self.boundary_flags)

    @property
    def n_dofs(self) -> int:
        return int(np.count_nonzero(~self.boundary_flags))

    def areas(self) -> np.ndarray:
        return signed_areas(self.vertices, self.triangles)

    def expand(self, coeffs: np.ndarray) -> np.ndarray:
        """Extend interior coefficients by zero boundary values."""
        coeffs = np.asarray(coeffs, dtype=float)
        if coeffs.shape != (self.n_dofs,):
            raise MeshError(f"expected {self.n_dofs} interior coefficients, got {coeffs.shape}")
        full = np.zeros(self.n_vertices)
        full[self.free_vertices] = coeffs
        return full

    def interpolate(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Nodal interpolant of func(x1, x2) on the interior vertices."""
        pts = self.vertices[self.free_vertices]
        return np.asarray(func(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(len(pts))

    def interpolate_full(self, func: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> np.ndarray:
        """Nodal interpolant of func on all vertices, boundary included."""
        return np.asarray(func(self.vertices[:, 0], self.vertices[:, 1]), dtype=float) * np.ones(self.n_vertices)


@dataclass(frozen=True, eq=False)
class Prolongation:
    """Coefficient transfer from a coarse nested space to a fine one."""
    matrix: sp.csr_matrix          # interior dofs: fine_dofs x coarse_dofs
    vertex_matrix: sp.csr_matrix   # all vertices: fine_vertices x coarse_vertices

    @property
    def shape(self):
        return self.matrix.shape

    def apply(self, coarse: np.ndarray) -> np.ndarray:
        return self.matrix @ np.asarray(coarse, dtype=float)

    def then(self, finer: "Prolongation") -> "Prolongation":
        """Compose: first self (coarse -> mid), then finer (mid -> fine)."""
        return Prolongation(matrix=(finer.matrix @ self.matrix).tocsr(),
                            vertex_matrix=(finer.vertex_matrix @ self.vertex_matrix).tocsr())

    @staticmethod
    def identity(mesh: Mesh) -> "Prolongation":
        return Prolongation(matrix=sp.identity(mesh.n_dofs, format="csr"),
                            vertex_matrix=sp.identity(mesh.n_vertices, format="csr"))


@dataclass
class Hierarchy:
    """Nested meshes h_0 ... h_L with per-level prolongations."""
    meshes: List[Mesh]
    prolongations: List[Optional[Prolongation]]   # prolongations[k]: level k-1 -> k
    coarse_index: int = 0
    beta: Optional[int] = 2                        # None for bisection hierarchies

    @property
    def n_levels(self) -> int:
        return len(self.meshes)

    @property
    def finest(self) -> Mesh:
        return self.meshes[-1]

    def append(self, mesh: Mesh, prolongation: Prolongation):
        if prolongation.shape != (mesh.n_dofs, self.finest.n_dofs):
            raise MeshError(f"prolongation shape {prolongation.shape} does not match "
                            f"({mesh.n_dofs}, {self.finest.n_dofs})")
        self.meshes.append(mesh)
        self.prolongations.append(prolongation)

    def composite_prolongation(self, from_level: int, to_level: int) -> Prolongation:
        return composite_prolongation(self, from_level, to_level)


# ---------------------------------------------------------------------------
# Geometry helpers
# ---------------------------------------------------------------------------

def signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a = vertices[triangles[:, 0]]
    b = vertices[triangles[:, 1]]
    c = vertices[triangles[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                  - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def _edge_lengths(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Lengths of local edges (opposite vertex 0, 1, 2), shape (T, 3)."""
    p0, p1, p2 = (vertices[triangles[:, i]] for i in range(3))
    return np.column_stack([np.linalg.norm(p2 - p1, axis=1),
                            np.linalg.norm(p0 - p2, axis=1),
                            np.linalg.norm(p1 - p0, axis=1)])


def max_diameter(mesh: Mesh) -> float:
    """Largest element diameter h."""
    return float(_edge_lengths(mesh.vertices, mesh.triangles).max())


def element_diameters(mesh: Mesh) -> np.ndarray:
    return _edge_lengths(mesh.vertices, mesh.triangles).max(axis=1)


def min_angle(mesh: Mesh) -> float:
    """Smallest interior angle over all triangles, in radians."""
    lengths = _edge_lengths(mesh.vertices, mesh.triangles)
    angles = []
    for i in range(3):
        a = lengths[:, i]
        b = lengths[:, (i + 1) % 3]
        c = lengths[:, (i + 2) % 3]
        cosine = np.clip((b ** 2 + c ** 2 - a ** 2) / (2.0 * b * c), -1.0, 1.0)
        angles.append(np.arccos(cosine))
    return float(np.min(angles))


def on_domain_boundary(domain: str, points: np.ndarray) -> np.ndarray:
    """Geometric boundary test for the supported domain tags."""
    x, y = points[:, 0], points[:, 1]
    close = lambda a, b: np.abs(a - b) <= _GEOM_TOL
    if domain == UNIT_SQUARE:
        return close(x, 0.0) | close(x, 1.0) | close(y, 0.0) | close(y, 1.0)
    if domain == L_SHAPE:
        return (close(x, -1.0) | close(y, 1.0)
                | (close(y, -1.0) & (x <= _GEOM_TOL))
                | (close(x, 1.0) & (y >= -_GEOM_TOL))
                | (close(x, 0.0) & (y <= _GEOM_TOL))
                | (close(y, 0.0) & (x >= -_GEOM_TOL)))
    raise MeshError(f"unknown domain tag '{domain}'")


def _local_edges(triangles: np.ndarray) -> np.ndarray:
    """Sorted endpoint pairs of local edges, shape (T, 3, 2); edge i is opposite vertex i."""
    pairs = np.stack([triangles[:, [1, 2]], triangles[:, [2, 0]], triangles[:, [0, 1]]], axis=1)
    return np.sort(pairs, axis=2)


def edge_structure(triangles: np.ndarray):
    """
    Unique edges of a triangulation.

    Returns:
        edges: (E, 2) sorted endpoint pairs, lexicographically ordered
        t2e: (T, 3) edge index of each local edge
        counts: (E,) number of triangles sharing each edge
    """
    local = _local_edges(triangles).reshape(-1, 2)
    edges, inverse, counts = np.unique(local, axis=0, return_inverse=True, return_counts=True)
    return edges, inverse.reshape(-1, 3), counts


def _boundary_from_topology(n_vertices: int, triangles: np.ndarray) -> np.ndarray:
    edges, _, counts = edge_structure(triangles)
    flags = np.zeros(n_vertices, dtype=bool)
    flags[edges[counts == 1].ravel()] = True
    return flags


def tag_longest_edge(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    """Rotate each triangle so that its longest edge becomes the refinement edge."""
    newest = np.argmax(_edge_lengths(vertices, triangles), axis=1)
    idx = (newest[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(triangles, idx, axis=1)


def conformity_check(mesh: Mesh):
    """
    Validate a mesh; raises MeshError on the first violated invariant.

    Checks positive orientation, edge sharing (at most two triangles per edge,
    single-owner edges only on the geometric boundary), boundary flags and the
    total area of the domain.
    """
    areas = mesh.areas()
    bad = np.flatnonzero(areas <= 0.0)
    if len(bad):
        raise MeshError(f"triangle {int(bad[0])} has non-positive signed area {areas[bad[0]]:.3e}")

    edges, _, counts = edge_structure(mesh.triangles)
    if np.any(counts > 2):
        raise MeshError(f"{int(np.count_nonzero(counts > 2))} edges shared by more than two triangles")
    single = edges[counts == 1]
    midpoints = 0.5 * (mesh.vertices[single[:, 0]] + mesh.vertices[single[:, 1]])
    hanging = ~(on_domain_boundary(mesh.domain, mesh.vertices[single[:, 0]])
                & on_domain_boundary(mesh.domain, mesh.vertices[single[:, 1]])
                & on_domain_boundary(mesh.domain, midpoints))
    if np.any(hanging):
        e = single[np.flatnonzero(hanging)[0]]
        raise MeshError(f"non-conforming edge ({int(e[0])}, {int(e[1])}) inside the domain")

    expected = on_domain_boundary(mesh.domain, mesh.vertices)
    if not np.array_equal(expected, mesh.boundary_flags):
        raise MeshError("boundary flags differ from the geometric boundary")

    area = DOMAIN_AREAS[mesh.domain]
    if abs(areas.sum() - area) > 1e-12 * area:
        raise MeshError(f"total area {areas.sum():.15g} differs from {area}")


# ---------------------------------------------------------------------------
# Initial meshes
# ---------------------------------------------------------------------------

def _structured_cells(xs: np.ndarray, ys: np.ndarray, keep_vertex, keep_cell):
    """Triangulate a lattice, two triangles per kept cell (diagonal SW-NE)."""
    nx, ny = len(xs), len(ys)
    X, Y = np.meshgrid(xs, ys)
    points = np.column_stack([X.ravel(), Y.ravel()])
    kept = keep_vertex(points[:, 0], points[:, 1])
    renumber = np.full(len(points), -1, dtype=np.int64)
    renumber[kept] = np.arange(int(np.count_nonzero(kept)))

    i, j = np.meshgrid(np.arange(ny - 1), np.arange(nx - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    cells = keep_cell(xs[j], ys[i])
    i, j = i[cells], j[cells]
    v00 = i * nx + j
    v10 = v00 + 1
    v11 = v00 + nx + 1
    v01 = v00 + nx
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.empty((2 * len(v00), 3), dtype=np.int64)
    triangles[0::2] = lower
    triangles[1::2] = upper
    return points[kept], renumber[triangles]


def build_unit_square(n: int) -> Mesh:
    """
    Structured triangulation of (0,1)^2 with n cells per side.

    Args:
        n: Cells per side (n >= 1)

    Returns:
        Mesh with (n+1)^2 vertices and 2n^2 triangles
    """
    if int(n) != n or n < 1:
        raise MeshError(f"cells per side must be a positive integer, got {n}")
    n = int(n)
    grid = np.linspace(0.0, 1.0, n + 1)
    points, triangles = _structured_cells(
        grid, grid,
        keep_vertex=lambda x, y: np.ones(len(x), dtype=bool),
        keep_cell=lambda x0, y0: np.ones(len(x0), dtype=bool))
    triangles = tag_longest_edge(points, triangles)
    return Mesh(points, triangles, on_domain_boundary(UNIT_SQUARE, points), UNIT_SQUARE)


def build_lshape(n: int) -> Mesh:
    """
    Structured triangulation of (-1,1)^2 minus [0,1)x(-1,0].

    Args:
        n: Cells per unit side (n >= 1)

    Returns:
        Mesh of the three unit squares; the reentrant corner (0,0) is a vertex
    """
    if int(n) != n or n < 1:
        raise MeshError(f"cells per unit side must be a positive integer, got {n}")
    n = int(n)
    grid = np.linspace(-1.0, 1.0, 2 * n + 1)
    h = 1.0 / n
    points, triangles = _structured_cells(
        grid, grid,
        keep_vertex=lambda x, y: ~((x > _GEOM_TOL) & (y < -_GEOM_TOL)),
        keep_cell=lambda x0, y0: ~((x0 > -_GEOM_TOL) & (y0 + h < _GEOM_TOL)))
    triangles = tag_longest_edge(points, triangles)
    return Mesh(points, triangles, on_domain_boundary(L_SHAPE, points), L_SHAPE)


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------

def _prolongation(coarse: Mesh, fine: Mesh, parents: np.ndarray) -> Prolongation:
    """Assemble the transfer for a refinement that appends midpoints of `parents` edges."""
    nc, nf = coarse.n_vertices, fine.n_vertices
    new = np.arange(nc, nf)
    rows = np.concatenate([np.arange(nc), new, new])
    cols = np.concatenate([np.arange(nc), parents[:, 0], parents[:, 1]])
    vals = np.concatenate([np.ones(nc), np.full(2 * len(new), 0.5)])
    vertex_matrix = sp.csr_matrix((vals, (rows, cols)), shape=(nf, nc))
    matrix = vertex_matrix[fine.free_vertices][:, coarse.free_vertices].tocsr()
    matrix.eliminate_zeros()
    return Prolongation(matrix=matrix, vertex_matrix=vertex_matrix)


def refine_regular(mesh: Mesh):
    """
    Split every triangle into four similar children (beta = 2).

    Coarse vertices keep their indices; midpoints follow in edge order.

    Returns:
        (fine Mesh, Prolongation coarse -> fine)
    """
    edges, t2e, counts = edge_structure(mesh.triangles)
    nv = mesh.n_vertices
    mid = nv + t2e
    midpoints = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, midpoints])

    a, b, c = mesh.triangles[:, 0], mesh.triangles[:, 1], mesh.triangles[:, 2]
    m0, m1, m2 = mid[:, 0], mid[:, 1], mid[:, 2]
    children = np.stack([
        np.column_stack([a, m2, m1]),
        np.column_stack([m2, b, m0]),
        np.column_stack([m1, m0, c]),
        np.column_stack([m0, m1, m2]),
    ], axis=1).reshape(-1, 3)
    children = tag_longest_edge(vertices, children)

    flags = np.concatenate([mesh.boundary_flags, counts == 1])
    fine = Mesh(vertices, children, flags, mesh.domain, mesh.level_id + 1)
    conformity_check(fine)
    return fine, _prolongation(mesh, fine, edges)


def bisect_marked(mesh: Mesh, marked: Sequence[int], max_sweeps: int = BISECTION_MAX_SWEEPS):
    """
    Newest-vertex bisection of the marked triangles plus conforming closure.

    Args:
        mesh: Conforming mesh carrying newest-vertex tags
        marked: Triangle indices to refine
        max_sweeps: Bound on closure sweeps

    Returns:
        (fine Mesh, Prolongation coarse -> fine)
    """
    marked = np.unique(np.asarray(marked, dtype=np.int64))
    if len(marked) and (marked[0] < 0 or marked[-1] >= mesh.n_triangles):
        raise MeshError("marked triangle index out of range")

    edges, t2e, counts = edge_structure(mesh.triangles)
    cut = np.zeros(len(edges), dtype=bool)
    cut[t2e[marked, 0]] = True

    # Closure: any element with a cut edge must also cut its refinement edge
    for _ in range(max_sweeps):
        needs = cut[t2e].any(axis=1) & ~cut[t2e[:, 0]]
        if not needs.any():
            break
        cut[t2e[needs, 0]] = True
    else:
        raise MeshError(f"bisection closure did not settle within {max_sweeps} sweeps")

    nv = mesh.n_vertices
    cut_edges = edges[cut]
    new_index = nv + np.arange(len(cut_edges))
    vertices = np.vstack([mesh.vertices,
                          0.5 * (mesh.vertices[cut_edges[:, 0]] + mesh.vertices[cut_edges[:, 1]])])
    stride = len(vertices) + 1
    keys = cut_edges[:, 0] * stride + cut_edges[:, 1]   # ascending: edges are lexicographic

    triangles = mesh.triangles.copy()
    for _ in range(3):
        base = np.sort(triangles[:, 1:3], axis=1)
        query = base[:, 0] * stride + base[:, 1]
        pos = np.minimum(np.searchsorted(keys, query), max(len(keys) - 1, 0))
        hit = np.zeros(len(triangles), dtype=bool) if not len(keys) else keys[pos] == query
        if not hit.any():
            break
        idx = np.flatnonzero(hit)
        m = new_index[pos[idx]]
        t0, t1, t2 = triangles[idx, 0], triangles[idx, 1], triangles[idx, 2]
        triangles[idx] = np.column_stack([m, t0, t1])
        triangles = np.vstack([triangles, np.column_stack([m, t2, t0])])
    else:
        raise MeshError("bisection left refinement edges uncut after three rounds")

    flags = np.concatenate([mesh.boundary_flags, counts[cut] == 1])
    fine = Mesh(vertices, triangles, flags, mesh.domain, mesh.level_id + 1)
    conformity_check(fine)
    return fine, _prolongation(mesh, fine, cut_edges)


def uniform_hierarchy(base: Mesh, levels: int, coarse_index: int = 0) -> Hierarchy:
    """Base mesh followed by levels-1 regular refinements."""
    if levels < 1:
        raise MeshError(f"a hierarchy needs at least one level, got {levels}")
    hier = Hierarchy(meshes=[base], prolongations=[None], coarse_index=coarse_index, beta=2)
    for _ in range(levels - 1):
        fine, prolongation = refine_regular(hier.finest)
        hier.append(fine, prolongation)
    return hier


def composite_prolongation(hier: Hierarchy, from_level: int, to_level: int) -> Prolongation:
    """Product of the per-level prolongations from from_level up to to_level."""
    if not (0 <= from_level < hier.n_levels and 0 <= to_level < hier.n_levels):
        raise MeshError(f"level out of range: {from_level} -> {to_level} "
                        f"(hierarchy has {hier.n_levels} levels)")
    if from_level > to_level:
        raise MeshError(f"from_level {from_level} is finer than to_level {to_level}")
    result = Prolongation.identity(hier.meshes[from_level])
    for k in range(from_level + 1, to_level + 1):
        result = result.then(hier.prolongations[k])
    return result


# ---------------------------------------------------------------------------
# Point evaluation and text I/O
# ---------------------------------------------------------------------------

def evaluate_at(mesh: Mesh, values: np.ndarray, points: np.ndarray) -> np.ndarray:
    """
    Evaluate a P1 function given by vertex values at arbitrary points.

    Points outside every triangle evaluate to NaN.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    det = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    dx = points[:, None, 0] - a[None, :, 0]
    dy = points[:, None, 1] - a[None, :, 1]
    l1 = ((c[:, 1] - a[:, 1]) * dx - (c[:, 0] - a[:, 0]) * dy) / det
    l2 = (-(b[:, 1] - a[:, 1]) * dx + (b[:, 0] - a[:, 0]) * dy) / det
    l0 = 1.0 - l1 - l2
    inside = (l0 >= -1e-12) & (l1 >= -1e-12) & (l2 >= -1e-12)
    out = np.full(len(points), np.nan)
    found = inside.any(axis=1)
    tri = np.argmax(inside, axis=1)
    rows = np.flatnonzero(found)
    t = mesh.triangles[tri[rows]]
    out[rows] = (l0[rows, tri[rows]] * values[t[:, 0]]
                 + l1[rows, tri[rows]] * values[t[:, 1]]
                 + l2[rows, tri[rows]] * values[t[:, 2]])
    return out


def export_mesh(mesh: Mesh, path: str):
    """Write the plain-text mesh format: 'V T', V lines 'x y flag', T lines 'i j k'."""
    lines = [f"{mesh.n_vertices} {mesh.n_triangles}"]
    for (x, y), flag in zip(mesh.vertices, mesh.boundary_flags):
        lines.append(f"{x:.17g} {y:.17g} {int(flag)}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i} {j} {k}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write('\n'.join(lines) + '\n')


def import_mesh(path: str, domain: str, level_id: int = 0) -> Mesh:
    """Read a mesh written by export_mesh; triangle vertex order (tags) is preserved."""
    with open(path, 'r', encoding='utf-8') as f:
        rows = [line.split() for line in f if line.strip()]
    try:
        nv, nt = int(rows[0][0]), int(rows[0][1])
        vdata = np.array(rows[1:1 + nv], dtype=float)
        tdata = np.array(rows[1 + nv:1 + nv + nt], dtype=np.int64)
    except (IndexError, ValueError) as e:
        raise MeshError(f"malformed mesh file {path}: {e}")
    if vdata.shape != (nv, 3) or tdata.shape != (nt, 3):
        raise MeshError(f"malformed mesh file {path}: expected {nv} vertices and {nt} triangles")
    mesh = Mesh(vdata[:, :2], tdata, vdata[:, 2].astype(bool), domain, level_id)
    conformity_check(mesh)
    return mesh


# Test
if __name__ == "__main__":
    m = build_lshape(2)
    print(f"L-shape n=2: {m.n_vertices} vertices, {m.n_triangles} triangles, {m.n_dofs} dofs")
    fine, P = refine_regular(m)
    print(f"refined: {fine.n_vertices} vertices, prolongation {P.shape}")
    adapt, Q = bisect_marked(fine, [0, 1, 2])
    print(f"bisected: {adapt.n_triangles} triangles, min angle {np.degrees(min_angle(adapt)):.1f} deg")
