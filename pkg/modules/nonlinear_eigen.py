"""
Module 4: Nonlinear Eigensolver
Self-consistent field (fixed-point) iteration for the discrete GPE eigenproblem:
freeze the density, solve the smallest eigenpair of the linearized pencil, mix,
repeat. Small spaces use a dense pencil solver; fine spaces use LOBPCG
preconditioned by a multigrid V-cycle.
"""

import os
import sys
import warnings
from dataclasses import dataclass, replace
from typing import Callable, Optional, Tuple, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (
    SCF_LAMBDA_TOL, SCF_U_TOL, SCF_MAX_ITERS, SCF_MIXING, SCF_OSCILLATION_FLIPS,
    DENSE_MAX_DIM, DENSE_RESIDUAL_TOL, DENSE_SWITCH, LOBPCG_TOL, LOBPCG_MAX_ITERS,
)
from modules.assembly import FeFunction, OperatorParts, ProblemSpec
from modules.mesh import Hierarchy
from modules.multigrid import MgWorkspace, build_workspace, preconditioner
from utils.errors import ConfigError, EigenSolverError
from utils.logger import (
    get_progress_logger, log_scf_event,
    SCF_NONCONVERGENCE, MIXING_REDUCTION, EIGENSOLVER_NONCONVERGENCE,
)

logger = get_progress_logger("nonlinear_eigen")

# level_id of vectors expressed in composite-space coordinates
COMPOSITE_LEVEL = -1

Matrix = Union[np.ndarray, sp.spmatrix]


@dataclass(frozen=True)
class ScfConfig:
    """Stopping rule and damping of the fixed-point iteration."""
    lambda_tol: float = SCF_LAMBDA_TOL
    u_tol: float = SCF_U_TOL
    max_iters: int = SCF_MAX_ITERS
    mixing: float = SCF_MIXING
    oscillation_flips: int = SCF_OSCILLATION_FLIPS

    def __post_init__(self):
        if not self.lambda_tol > 0.0:
            raise ConfigError("scf_lambda_tol", f"must be positive, got {self.lambda_tol}")
        if not self.u_tol > 0.0:
            raise ConfigError("scf_u_tol", f"must be positive, got {self.u_tol}")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ConfigError("scf_max_iters", f"must be an integer >= 1, got {self.max_iters}")
        if not 0.0 < self.mixing <= 1.0:
            raise ConfigError("scf_mixing", f"must lie in (0, 1], got {self.mixing}")
        if self.oscillation_flips < 1:
            raise ConfigError("scf_oscillation_flips", f"must be >= 1, got {self.oscillation_flips}")

    def with_overrides(self, **kwargs) -> "ScfConfig":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {"lambda_tol": self.lambda_tol, "u_tol": self.u_tol, "max_iters": self.max_iters,
                "mixing": self.mixing, "oscillation_flips": self.oscillation_flips}


@dataclass
class EigenPair:
    """Discrete chemical potential and M-normalized eigenfunction."""
    lam: float
    u: FeFunction
    residual: float
    scf_iters: int
    converged: bool = True

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "residual": self.residual,
                "scf_iters": self.scf_iters, "converged": self.converged,
                "level_id": self.u.level_id, "n_dofs": len(self.u)}


@dataclass
class IterativeStats:
    iterations: int
    residual: float
    converged: bool


Eigensolver = Callable[[Matrix, Matrix, Optional[np.ndarray]], Tuple[float, np.ndarray]]


@dataclass(eq=False)
class ScfProblem:
    """
    Matrices of one space plus the density-dependent nonlinear term.

    linear holds A_stiff + A_W, nonlinear(u) returns N(u) in the same basis.
    sign_weights defines the sign convention (sign_weights @ u >= 0).
    """
    linear: Matrix
    mass: Matrix
    nonlinear: Callable[[np.ndarray], Matrix]
    zeta: float
    level_id: int
    eigensolver: Eigensolver
    sign_weights: Optional[np.ndarray] = None

    @property
    def size(self) -> int:
        return self.linear.shape[0]

    def operator(self, u: np.ndarray) -> Matrix:
        if self.zeta == 0.0:
            return self.linear
        return self.linear + self.nonlinear(u)

    @classmethod
    def from_parts(cls, parts: OperatorParts, eigensolver: Optional[Eigensolver] = None) -> "ScfProblem":
        return cls(linear=parts.linear, mass=parts.mass, nonlinear=parts.nonlinear,
                   zeta=parts.spec.zeta, level_id=parts.level_id,
                   eigensolver=eigensolver or dense_eigensolver,
                   sign_weights=parts.mass @ np.ones(parts.n_dofs))


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize(
    u: Union[FeFunction, np.ndarray],
    M: Matrix,
    sign_weights: Optional[np.ndarray] = None
) -> Union[FeFunction, np.ndarray]:
    """
    Scale u to u^T M u = 1 and fix the sign so that 1^T M u >= 0.

    Args:
        u: FeFunction or coefficient vector
        M: Mass matrix of u's space
        sign_weights: Vector w of the sign test w @ u >= 0 (defaults to M 1)

    Returns:
        Same type as u

    Raises:
        EigenSolverError: for a zero vector
    """
    x = u.coeffs if isinstance(u, FeFunction) else np.asarray(u, dtype=float)
    norm_sq = float(x @ (M @ x))
    if not norm_sq > 0.0:
        raise EigenSolverError("cannot normalize a vector with zero mass norm")
    weights = M @ np.ones(len(x)) if sign_weights is None else sign_weights
    out = x / np.sqrt(norm_sq)
    if float(weights @ out) < 0.0:
        out = -out
    return FeFunction(u.level_id, out) if isinstance(u, FeFunction) else out


def _m_norm(x: np.ndarray, M: Matrix) -> float:
    return float(np.sqrt(max(float(x @ (M @ x)), 0.0)))


# ---------------------------------------------------------------------------
# Inner eigensolvers
# ---------------------------------------------------------------------------

def _dense(A: Matrix) -> np.ndarray:
    return A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)


def smallest_pair_dense(A: Matrix, M: Matrix) -> Tuple[float, np.ndarray]:
    """
    Smallest eigenpair of the symmetric pencil (A, M) by dense factorization.

    Args:
        A: Symmetric matrix
        M: SPD matrix

    Returns:
        (lambda, M-normalized eigenvector)

    Raises:
        EigenSolverError: dimension above the dense cap, M not SPD, or a
            solution whose backward error exceeds DENSE_RESIDUAL_TOL
    """
    n = A.shape[0]
    if n > DENSE_MAX_DIM:
        raise EigenSolverError(f"dense eigensolver limited to {DENSE_MAX_DIM} dofs, got {n}")
    if n == 0:
        raise EigenSolverError("empty eigenproblem")
    Ad, Md = _dense(A), _dense(M)
    try:
        values, vectors = sla.eigh(Ad, Md, subset_by_index=[0, 0])
    except np.linalg.LinAlgError as e:
        raise EigenSolverError(f"mass matrix is not positive definite: {e}")
    lam, vec = float(values[0]), vectors[:, 0]

    scale = max(np.abs(Ad).max(), abs(lam) * np.abs(Md).max()) * max(float(np.linalg.norm(vec)), 1.0)
    residual = float(np.linalg.norm(Ad @ vec - lam * (Md @ vec)))
    if not residual <= DENSE_RESIDUAL_TOL * scale:
        log_scf_event(EIGENSOLVER_NONCONVERGENCE,
                      f"dense pencil residual {residual:.3e} exceeds {DENSE_RESIDUAL_TOL:g} * {scale:.3e}",
                      context={"n": n, "lambda": lam})
        raise EigenSolverError(f"dense pencil solution has residual {residual:.3e} (n={n})")
    return lam, vec


def smallest_pair_iterative(
    A: Matrix,
    M: Matrix,
    precond: Union[MgWorkspace, spla.LinearOperator, None] = None,
    x0: Optional[np.ndarray] = None,
    tol: Optional[float] = None,
    max_iters: int = LOBPCG_MAX_ITERS
) -> Tuple[float, np.ndarray, IterativeStats]:
    """
    Smallest eigenpair of (A, M) by LOBPCG.

    Args:
        A: SPD matrix
        M: SPD mass matrix
        precond: Multigrid workspace (applied as one V-cycle) or LinearOperator
        x0: Initial guess (all-ones when omitted)
        tol: Absolute residual tolerance (LOBPCG_TOL * max|A_ij| when omitted)
        max_iters: Iteration cap

    Returns:
        (lambda, M-normalized eigenvector, IterativeStats)
    """
    n = A.shape[0]
    if n == 0:
        raise EigenSolverError("empty eigenproblem")
    if tol is None:
        tol = LOBPCG_TOL * float(abs(A).max())
    prec = preconditioner(precond) if isinstance(precond, MgWorkspace) else precond
    X = (np.ones(n) if x0 is None else np.asarray(x0, dtype=float)).reshape(n, 1)

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        values, vectors, history = spla.lobpcg(A, X, B=M, M=prec, tol=tol, maxiter=max_iters,
                                               largest=False, retResidualNormsHistory=True)
    vec = vectors[:, 0]
    vec = vec / _m_norm(vec, M)
    lam = float(vec @ (A @ vec))
    residual = float(np.linalg.norm(A @ vec - lam * (M @ vec)))
    stats = IterativeStats(iterations=max(len(history) - 1, 0), residual=residual,
                           converged=residual <= 10.0 * tol)
    if not stats.converged:
        log_scf_event(EIGENSOLVER_NONCONVERGENCE,
                      f"LOBPCG stopped after {stats.iterations} iterations with residual {residual:.3e}",
                      context={"tol": tol, "n": n})
    return lam, vec, stats


def dense_eigensolver(A: Matrix, M: Matrix, x0: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    return smallest_pair_dense(A, M)


@dataclass
class IterativeEigensolver:
    """LOBPCG with a fixed preconditioner; accumulates iteration counts."""
    precond: Union[MgWorkspace, spla.LinearOperator, None] = None
    total_iterations: int = 0
    calls: int = 0

    def __call__(self, A: Matrix, M: Matrix, x0: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
        lam, vec, stats = smallest_pair_iterative(A, M, self.precond, x0=x0)
        self.total_iterations += stats.iterations
        self.calls += 1
        return lam, vec


# ---------------------------------------------------------------------------
# Self-consistent field iteration
# ---------------------------------------------------------------------------

def scf_solve(
    problem: ScfProblem,
    cfg: Optional[ScfConfig] = None,
    initial: Union[FeFunction, np.ndarray, None] = None
) -> EigenPair:
    """
    Fixed-point iteration u -> smallest eigenvector of (A_lin + N(u), M).

    Args:
        problem: Matrices and nonlinear assembler of the space
        cfg: Stopping rule and damping
        initial: Starting iterate; the zeta = 0 pencil solution when omitted

    Returns:
        EigenPair; converged=False (and an audit event) when the iteration cap is hit
    """
    cfg = cfg or ScfConfig()
    M = problem.mass
    weights = problem.sign_weights

    if initial is None or problem.zeta == 0.0:
        x0 = None if initial is None else (initial.coeffs if isinstance(initial, FeFunction) else initial)
        _, v = problem.eigensolver(problem.linear, M, x0)
        u = normalize(v, M, weights)
        if problem.zeta == 0.0:
            return _finish(problem, u, scf_iters=1, converged=True)
    else:
        u = normalize(initial.coeffs if isinstance(initial, FeFunction) else initial, M, weights)

    alpha = cfg.mixing
    lam_prev = None
    last_sign = 0
    flips = 0
    du = np.inf
    iters = 0
    best = None
    converged = False
    while True:
        A = problem.operator(u)
        Au = A @ u
        lam = float(u @ Au)
        residual = float(np.linalg.norm(Au - lam * (M @ u)))
        if best is None or residual < best[1]:
            best = (u, residual)

        if lam_prev is not None:
            dl = lam - lam_prev
            if abs(dl) <= cfg.lambda_tol * max(1.0, abs(lam)) and du <= cfg.u_tol:
                converged = True
                break
            sign = int(np.sign(dl))
            if sign and last_sign and sign != last_sign:
                flips += 1
                if flips >= cfg.oscillation_flips and alpha > 1e-3:
                    alpha *= 0.5
                    flips = 0
                    log_scf_event(MIXING_REDUCTION, f"lambda oscillates; mixing reduced to {alpha:g}",
                                  level=problem.level_id, context={"iteration": iters, "lambda": lam})
            last_sign = sign or last_sign
        if iters >= cfg.max_iters:
            break

        _, v = problem.eigensolver(A, M, u)
        v = normalize(v, M, weights)
        u_next = v if alpha >= 1.0 else normalize((1.0 - alpha) * u + alpha * v, M, weights)
        du = _m_norm(u_next - u, M)
        u = u_next
        lam_prev = lam
        iters += 1

    if not converged:
        u = best[0]
        log_scf_event(SCF_NONCONVERGENCE,
                      f"SCF stopped after {iters} iterations (residual {best[1]:.3e})",
                      level=problem.level_id, context={"mixing": alpha, "max_iters": cfg.max_iters})
    return _finish(problem, u, scf_iters=iters, converged=converged)


def _finish(problem: ScfProblem, u: np.ndarray, scf_iters: int, converged: bool) -> EigenPair:
    A = problem.operator(u)
    Au = A @ u
    lam = float(u @ Au) / float(u @ (problem.mass @ u))
    residual = float(np.linalg.norm(Au - lam * (problem.mass @ u)))
    return EigenPair(lam=lam, u=FeFunction(problem.level_id, u), residual=residual,
                     scf_iters=scf_iters, converged=converged)


# ---------------------------------------------------------------------------
# Direct fine-grid baseline
# ---------------------------------------------------------------------------

def direct_solve(
    hier: Hierarchy,
    level: int,
    spec: ProblemSpec,
    cfg: Optional[ScfConfig] = None,
    parts: Optional[OperatorParts] = None,
    initial: Union[FeFunction, np.ndarray, None] = None
) -> EigenPair:
    """
    Solve the discrete GPE on one hierarchy level without correction.

    Uses the dense pencil solver up to DENSE_SWITCH dofs and LOBPCG with a
    multigrid V-cycle on A_stiff + A_W above it.
    """
    mesh = hier.meshes[level]
    parts = parts or OperatorParts.build(mesh, spec)
    if parts.n_dofs == 0:
        raise EigenSolverError(f"level {level} has no interior dofs")
    if parts.n_dofs <= DENSE_SWITCH:
        solver = dense_eigensolver
    else:
        transfers = [hier.prolongations[k].matrix for k in range(1, level + 1)]
        solver = IterativeEigensolver(build_workspace(parts.linear, transfers))
    pair = scf_solve(ScfProblem.from_parts(parts, solver), cfg, initial)
    logger.info("direct solve level %d: %d dofs, lambda=%.10f, %d SCF iterations",
                level, parts.n_dofs, pair.lam, pair.scf_iters)
    return pair


# Test
if __name__ == "__main__":
    from modules.mesh import build_unit_square, uniform_hierarchy

    hier = uniform_hierarchy(build_unit_square(6), 2)
    pair = direct_solve(hier, 1, ProblemSpec())
    print(f"lambda = {pair.lam:.10f}, residual = {pair.residual:.2e}, SCF iterations = {pair.scf_iters}")
