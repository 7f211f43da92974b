"""
Module 3: Geometric Multigrid
V-cycle solver for SPD systems on a nested hierarchy. Coarse operators are Galerkin
products P^T A P, smoothing is multiplicative pointwise relaxation (ascending dof
order before the coarse correction, descending after) and the coarsest level is
solved by a dense Cholesky factorization.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import MG_PRE_SWEEPS, MG_POST_SWEEPS, MG_MAX_CYCLES, MG_DIVERGENCE_CYCLES
from utils.errors import MultigridError, MultigridDivergenceError
from utils.logger import get_progress_logger, log_multigrid_event

logger = get_progress_logger("multigrid")


class _TriangularSolver:
    """Exact solve with the lower or upper triangle of A (one relaxation sweep)."""

    def __init__(self, triangle: sp.spmatrix):
        self.size = triangle.shape[0]
        self._lu = None
        if self.size:
            self._lu = spla.splu(sp.csc_matrix(triangle), permc_spec="NATURAL",
                                 diag_pivot_thresh=0.0)

    def solve(self, r: np.ndarray) -> np.ndarray:
        if not self.size:
            return np.zeros(0)
        return self._lu.solve(r)


@dataclass(eq=False)
class MgWorkspace:
    """Per-level matrices (coarsest first), transfers and smoother factors."""
    matrices: List[sp.csr_matrix]
    prolongations: List[Optional[sp.csr_matrix]]   # prolongations[k]: level k-1 -> k
    pre_sweeps: int = MG_PRE_SWEEPS
    post_sweeps: int = MG_POST_SWEEPS
    forward: List[Optional[_TriangularSolver]] = field(default_factory=list, repr=False)
    backward: List[Optional[_TriangularSolver]] = field(default_factory=list, repr=False)
    coarse_factor: Optional[tuple] = field(default=None, repr=False)

    @property
    def n_levels(self) -> int:
        return len(self.matrices)

    @property
    def size(self) -> int:
        return self.matrices[-1].shape[0]

    def truncated(self, depth: int) -> "MgWorkspace":
        """Workspace of the first `depth` levels, sharing all factorizations."""
        if not 1 <= depth <= self.n_levels:
            raise MultigridError(f"depth {depth} outside 1..{self.n_levels}")
        return MgWorkspace(matrices=self.matrices[:depth], prolongations=self.prolongations[:depth],
                           pre_sweeps=self.pre_sweeps, post_sweeps=self.post_sweeps,
                           forward=self.forward[:depth], backward=self.backward[:depth],
                           coarse_factor=self.coarse_factor)


@dataclass
class MgSolveResult:
    x: np.ndarray
    cycles: int
    residual: float      # ||b - Ax|| / ||b||
    converged: bool


def build_workspace(
    A: sp.spmatrix,
    prolongations: Sequence[sp.spmatrix],
    pre_sweeps: int = MG_PRE_SWEEPS,
    post_sweeps: int = MG_POST_SWEEPS
) -> MgWorkspace:
    """
    Build the multigrid hierarchy for A by Galerkin congruence.

    Args:
        A: SPD matrix on the finest level
        prolongations: Interior-dof transfers ordered coarse to fine; the last
            one maps onto A's level
        pre_sweeps: Forward relaxation sweeps per level
        post_sweeps: Backward relaxation sweeps per level

    Returns:
        MgWorkspace with factorized smoothers and coarsest solve

    Raises:
        MultigridError: on dimension mismatch or an indefinite coarsest matrix
    """
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise MultigridError(f"system matrix must be square, got {A.shape}")
    transfers = [sp.csr_matrix(P) for P in prolongations]

    matrices = [A]
    for P in reversed(transfers):
        if P.shape[0] != matrices[0].shape[0]:
            raise MultigridError(f"prolongation shape {P.shape} does not fit level of size {matrices[0].shape[0]}")
        matrices.insert(0, (P.T @ matrices[0] @ P).tocsr())

    ws = MgWorkspace(matrices=matrices, prolongations=[None] + transfers,
                     pre_sweeps=pre_sweeps, post_sweeps=post_sweeps)
    ws.forward.append(None)
    ws.backward.append(None)
    for level in matrices[1:]:
        ws.forward.append(_TriangularSolver(sp.tril(level)))
        ws.backward.append(_TriangularSolver(sp.triu(level)))

    coarsest = matrices[0].toarray()
    if coarsest.size:
        try:
            ws.coarse_factor = sla.cho_factor(coarsest, lower=True)
        except np.linalg.LinAlgError as e:
            raise MultigridError(f"coarsest matrix ({coarsest.shape[0]} dofs) is not SPD: {e}")
    logger.debug("multigrid workspace: %d levels, sizes %s", ws.n_levels, [m.shape[0] for m in matrices])
    return ws


def _cycle(ws: MgWorkspace, level: int, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if level == 0:
        if ws.coarse_factor is None:
            return np.zeros_like(b)
        return sla.cho_solve(ws.coarse_factor, b)

    A = ws.matrices[level]
    for _ in range(ws.pre_sweeps):
        x = x + ws.forward[level].solve(b - A @ x)

    P = ws.prolongations[level]
    coarse = _cycle(ws, level - 1, P.T @ (b - A @ x), np.zeros(P.shape[1]))
    x = x + P @ coarse

    for _ in range(ws.post_sweeps):
        x = x + ws.backward[level].solve(b - A @ x)
    return x


def _check_vector(ws: MgWorkspace, v: np.ndarray, name: str) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (ws.size,):
        raise MultigridError(f"{name} has shape {v.shape}, finest level has {ws.size} dofs")
    if not np.all(np.isfinite(v)):
        raise MultigridError(f"{name} contains non-finite values")
    return v


def vcycle(ws: MgWorkspace, b: np.ndarray, x: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply one V-cycle to A x = b starting from x (zero when omitted)."""
    b = _check_vector(ws, b, "right-hand side")
    x = np.zeros_like(b) if x is None else _check_vector(ws, x, "initial guess")
    return _cycle(ws, ws.n_levels - 1, b, x.copy())


def solve(
    ws: MgWorkspace,
    b: np.ndarray,
    rel_tol: float,
    max_cycles: int = MG_MAX_CYCLES,
    x0: Optional[np.ndarray] = None,
    level: Optional[int] = None
) -> MgSolveResult:
    """
    Iterate V-cycles until ||b - Ax||_2 <= rel_tol ||b||_2.

    Args:
        ws: Multigrid workspace
        b: Right-hand side on the finest level
        rel_tol: Relative residual target in (0, 1)
        max_cycles: Cycle cap; hitting it is logged and reported, not raised
        x0: Initial guess
        level: Hierarchy level recorded with audit events

    Returns:
        MgSolveResult

    Raises:
        MultigridDivergenceError: residual grew over consecutive cycles
    """
    if not 0.0 < rel_tol < 1.0:
        raise MultigridError(f"rel_tol must lie in (0, 1), got {rel_tol}")
    b = _check_vector(ws, b, "right-hand side")
    x = np.zeros_like(b) if x0 is None else _check_vector(ws, x0, "initial guess").copy()
    A = ws.matrices[-1]

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return MgSolveResult(x=np.zeros_like(b), cycles=0, residual=0.0, converged=True)

    residual = float(np.linalg.norm(b - A @ x)) / b_norm
    growth = 0
    cycles = 0
    while residual > rel_tol and cycles < max_cycles:
        x = _cycle(ws, ws.n_levels - 1, b, x)
        cycles += 1
        new_residual = float(np.linalg.norm(b - A @ x)) / b_norm
        growth = growth + 1 if new_residual > residual else 0
        residual = new_residual
        if growth >= MG_DIVERGENCE_CYCLES:
            raise MultigridDivergenceError(
                f"residual grew over {growth} consecutive V-cycles (now {residual:.3e})")

    converged = residual <= rel_tol
    if not converged:
        log_multigrid_event(f"V-cycle cap {max_cycles} reached with relative residual {residual:.3e}",
                            level=level, context={"rel_tol": rel_tol, "residual": residual})
    return MgSolveResult(x=x, cycles=cycles, residual=residual, converged=converged)


def cycle_cost(ws: MgWorkspace) -> int:
    """
    Operation-count model of one V-cycle.

    Each relaxation sweep costs a residual (nnz) plus a triangular solve
    ((nnz + n) / 2); each level adds one residual and a restriction/prolongation
    pair. The coarsest dense solve costs n_c^2.
    """
    sweeps = ws.pre_sweeps + ws.post_sweeps
    total = 0
    for level in range(1, ws.n_levels):
        A = ws.matrices[level]
        n = A.shape[0]
        total += sweeps * (A.nnz + (A.nnz + n) // 2)
        total += A.nnz + 2 * ws.prolongations[level].nnz
    n_c = ws.matrices[0].shape[0]
    return int(total + n_c * n_c)


def preconditioner(ws: MgWorkspace) -> spla.LinearOperator:
    """One V-cycle from a zero guess, as a symmetric LinearOperator."""
    n = ws.size
    return spla.LinearOperator((n, n), matvec=lambda r: _cycle(ws, ws.n_levels - 1, np.ravel(r), np.zeros(n)),
                               dtype=float)


# Test
if __name__ == "__main__":
    from modules.mesh import build_unit_square, uniform_hierarchy
    from modules.assembly import assemble_stiffness

    hier = uniform_hierarchy(build_unit_square(2), 5)
    K = assemble_stiffness(hier.finest)
    ws = build_workspace(K, [P.matrix for P in hier.prolongations[1:]])
    rhs = np.ones(K.shape[0])
    result = solve(ws, rhs, rel_tol=1e-10)
    print(f"{ws.n_levels} levels, {result.cycles} cycles, residual {result.residual:.2e}")
