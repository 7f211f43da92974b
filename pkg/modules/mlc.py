"""
Module 5: Multilevel Correction
One correction step lifts an eigenpair from level k to level k+1 with a single
linear solve (multigrid on the stiffness matrix) and a small nonlinear eigensolve
on the composite space V_H + span{u~}. The multigrid scheme chains correction
steps from the first level to the finest and records the work spent per level.
"""

import os
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import (
    GUARD_TOL, GUARD_ZERO_TOL, MG_C, MG_MAX_CYCLES, MLC_MIXING, MLC_SCF_FACTOR,
)
from modules.assembly import FeFunction, OperatorParts, ProblemSpec
from modules.mesh import Hierarchy, max_diameter
from modules.multigrid import MgWorkspace, build_workspace, solve as mg_solve
from modules.nonlinear_eigen import (
    COMPOSITE_LEVEL, EigenPair, ScfConfig, ScfProblem,
    dense_eigensolver, direct_solve, normalize, scf_solve,
)
from utils.errors import AssemblyError, CompositeSpaceError, GpeMlcError
from utils.logger import (
    get_progress_logger, log_correction_event, COMPOSITE_GUARD, BRANCH_CAPTURE,
)

logger = get_progress_logger("mlc")

# Relative size of the opposite-sign part that flags a possible branch capture
MIXED_SIGN_TOL = 1e-6


@dataclass(frozen=True)
class MlcConfig:
    """Knobs of the multilevel scheme."""
    scf: ScfConfig = field(default_factory=ScfConfig)
    mg_c: float = MG_C
    mg_max_cycles: int = MG_MAX_CYCLES
    scf_factor: float = MLC_SCF_FACTOR
    mixing: float = MLC_MIXING
    first_level: int = 0       # hierarchy index of h_1

    def composite_scf(self, h: float) -> ScfConfig:
        """Composite-space SCF: tolerances scale with h^2."""
        tol = self.scf_factor * h * h
        return self.scf.with_overrides(lambda_tol=tol, u_tol=tol, mixing=self.mixing)

    def to_dict(self) -> dict:
        return {"scf": self.scf.to_dict(), "mg_c": self.mg_c, "mg_max_cycles": self.mg_max_cycles,
                "scf_factor": self.scf_factor, "mixing": self.mixing, "first_level": self.first_level}


@dataclass
class LevelWork:
    """Counters and stage times of one level."""
    level: int
    n_dofs: int
    lam: float
    vcycles: int = 0
    mg_residual: float = 0.0
    mg_converged: bool = True
    scf_iters: int = 0
    scf_converged: bool = True
    guard_used: bool = False
    branch_flag: bool = False
    times: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"level": self.level, "n_dofs": self.n_dofs, "lambda": self.lam,
                "vcycles": self.vcycles, "mg_residual": self.mg_residual,
                "mg_converged": self.mg_converged, "scf_iters": self.scf_iters,
                "scf_converged": self.scf_converged, "guard_used": self.guard_used,
                "branch_flag": self.branch_flag}


@dataclass
class WorkReport:
    """
    Work accounting of one multilevel run.

    M_H is the dense cost of the composite-space eigensolves,
    varpi * (N_H + 1)^3, and M_{h_1} is the measured wall time of the
    first-level solve. The count-based estimate (1 + varpi) N_n + M_H log N_n
    is deterministic and goes into the report; M_{h_1} and the stage times
    only appear in timing().
    """
    levels: List[LevelWork] = field(default_factory=list)
    composite_dim: int = 0

    @property
    def total_dofs(self) -> int:
        return sum(w.n_dofs for w in self.levels)

    @property
    def max_scf_iters(self) -> int:
        corrections = [w.scf_iters for w in self.levels[1:]]
        return max(corrections) if corrections else 0

    @property
    def m_coarse(self) -> float:
        return float(self.max_scf_iters * self.composite_dim ** 3)

    @property
    def m_h1_seconds(self) -> float:
        return sum(self.levels[0].times.values()) if self.levels else 0.0

    @property
    def work_estimate(self) -> float:
        """(1 + varpi) N_n + M_H log N_n with a single computing node."""
        if not self.levels:
            return 0.0
        n_fine = self.levels[-1].n_dofs
        return float((1 + self.max_scf_iters) * n_fine + self.m_coarse * np.log(max(n_fine, 1)))

    @property
    def converged(self) -> bool:
        return all(w.scf_converged and w.mg_converged for w in self.levels)

    def level_times(self) -> List[float]:
        return [sum(w.times.values()) for w in self.levels]

    def total_time(self) -> float:
        return sum(self.level_times())

    def to_dict(self) -> dict:
        return {
            "levels": [w.to_dict() for w in self.levels],
            "composite_dim": self.composite_dim,
            "total_dofs": self.total_dofs,
            "max_scf_iters": self.max_scf_iters,
            "m_coarse": self.m_coarse,
            "work_estimate": self.work_estimate,
        }

    def timing(self) -> dict:
        return {
            "levels": [dict(level=w.level, **w.times) for w in self.levels],
            "m_h1_seconds": self.m_h1_seconds,
            "total_seconds": self.total_time(),
        }


# ---------------------------------------------------------------------------
# Composite space
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CorrectionSpace:
    """Basis [P_H | u~] of V_H + span{u~} on the fine level, with cached blocks."""
    parts: OperatorParts
    coarse_prolongation: sp.csr_matrix   # fine dofs x N_H
    u_tilde: np.ndarray
    linear_block: np.ndarray             # [P|u]^T (A_stiff + A_W) [P|u]
    mass_block: np.ndarray               # [P|u]^T M [P|u]
    sign_weights: np.ndarray
    guard_used: bool = False
    schur: float = 0.0

    @property
    def dim(self) -> int:
        return self.coarse_prolongation.shape[1] + 1

    def expand(self, c: np.ndarray) -> np.ndarray:
        """Fine-level coefficients of the composite vector c."""
        return self.coarse_prolongation @ c[:-1] + c[-1] * self.u_tilde

    def congruence(self, A: sp.spmatrix) -> np.ndarray:
        return _congruence(A, self.coarse_prolongation, self.u_tilde)

    def nonlinear(self, c: np.ndarray) -> np.ndarray:
        """[P|u]^T N(w) [P|u] for the fine density of w = expand(c)."""
        return self.congruence(self.parts.nonlinear(self.expand(c)))

    def scf_problem(self) -> ScfProblem:
        return ScfProblem(linear=self.linear_block, mass=self.mass_block, nonlinear=self.nonlinear,
                          zeta=self.parts.spec.zeta, level_id=COMPOSITE_LEVEL,
                          eigensolver=dense_eigensolver, sign_weights=self.sign_weights)


def _congruence(A: sp.spmatrix, P: sp.csr_matrix, u: np.ndarray) -> np.ndarray:
    AP = A @ P
    Au = A @ u
    n_h = P.shape[1]
    out = np.empty((n_h + 1, n_h + 1))
    out[:n_h, :n_h] = (P.T @ AP).toarray() if sp.issparse(AP) else P.T @ AP
    coupling = P.T @ Au
    out[:n_h, n_h] = coupling
    out[n_h, :n_h] = coupling
    out[n_h, n_h] = float(u @ Au)
    return out


def build_correction_space(
    hier: Hierarchy,
    level: int,
    u_tilde: Union[FeFunction, np.ndarray],
    parts: OperatorParts,
    coarse_index: Optional[int] = None
) -> CorrectionSpace:
    """
    Assemble the composite space V_H + span{u~} by congruence on the fine level.

    When the Schur complement of u~ against V_H in the mass matrix falls below
    GUARD_TOL * u~^T M u~, u~ is replaced by its M-orthogonal complement to V_H
    (same span).

    Raises:
        CompositeSpaceError: u~ lies in V_H to working precision
    """
    coarse_index = hier.coarse_index if coarse_index is None else coarse_index
    u = u_tilde.coeffs if isinstance(u_tilde, FeFunction) else np.asarray(u_tilde, dtype=float)
    if isinstance(u_tilde, FeFunction) and u_tilde.level_id != hier.meshes[level].level_id:
        raise AssemblyError(f"u~ lives on level {u_tilde.level_id}, space on {hier.meshes[level].level_id}")
    P = hier.composite_prolongation(coarse_index, level).matrix
    M = parts.mass
    n_h = P.shape[1]

    mass_hh = (P.T @ (M @ P)).toarray()
    factor = sla.cho_factor(mass_hh, lower=True) if n_h else None
    b = P.T @ (M @ u)
    norm_sq = float(u @ (M @ u))
    if not norm_sq > 0.0:
        raise CompositeSpaceError("u~ has zero mass norm")
    coarse_coeffs = sla.cho_solve(factor, b) if n_h else np.zeros(0)
    schur = norm_sq - float(b @ coarse_coeffs)

    guard_used = False
    if schur <= GUARD_TOL * norm_sq:
        u = u - P @ coarse_coeffs
        remaining = float(u @ (M @ u))
        log_correction_event(COMPOSITE_GUARD,
                             f"Schur complement {schur:.3e} <= {GUARD_TOL:g} * {norm_sq:.3e}; u~ orthogonalized",
                             level=level, context={"schur": schur, "remaining": remaining})
        if remaining <= GUARD_ZERO_TOL * norm_sq:
            raise CompositeSpaceError(
                f"u~ lies in V_H: Schur complement {schur:.3e}, orthogonal part {remaining:.3e} "
                f"(mass norm {norm_sq:.3e})")
        guard_used = True

    linear_block = _congruence(parts.linear, P, u)
    mass_block = _congruence(M, P, u)
    weights = M @ np.ones(parts.n_dofs)
    sign_weights = np.concatenate([P.T @ weights, [float(u @ weights)]])
    return CorrectionSpace(parts=parts, coarse_prolongation=P, u_tilde=u,
                           linear_block=linear_block, mass_block=mass_block,
                           sign_weights=sign_weights, guard_used=guard_used, schur=schur)


# ---------------------------------------------------------------------------
# Correction step
# ---------------------------------------------------------------------------

def aux_rhs(lam: float, u: Union[FeFunction, np.ndarray], parts: OperatorParts) -> np.ndarray:
    """lambda M u - (A_stiff + A_W + N(u)) u for a function already on the fine level."""
    if isinstance(u, FeFunction) and u.level_id != parts.level_id:
        raise AssemblyError(f"function lives on level {u.level_id}, operators on level {parts.level_id}")
    x = u.coeffs if isinstance(u, FeFunction) else np.asarray(u, dtype=float)
    if x.shape != (parts.n_dofs,):
        raise AssemblyError(f"expected {parts.n_dofs} coefficients, got {x.shape}")
    return lam * (parts.mass @ x) - parts.operator(x) @ x


def _lift(hier: Hierarchy, level: int, u: FeFunction) -> np.ndarray:
    fine_id = hier.meshes[level].level_id
    if u.level_id == fine_id:
        return u.coeffs
    if level > 0 and u.level_id == hier.meshes[level - 1].level_id:
        return hier.prolongations[level].apply(u.coeffs)
    raise AssemblyError(f"cannot transfer a level-{u.level_id} function to level {fine_id}")


def _mixed_sign(u: np.ndarray) -> bool:
    scale = np.abs(u).max()
    return bool(scale > 0.0 and -u.min() > MIXED_SIGN_TOL * scale)


def correction_step(
    hier: Hierarchy,
    level: int,
    lam: float,
    u: FeFunction,
    spec: ProblemSpec,
    cfg: Optional[MlcConfig] = None,
    parts: Optional[OperatorParts] = None,
    mg_ws: Optional[MgWorkspace] = None,
    h: Optional[float] = None
):
    """
    One correction step onto hierarchy level `level`.

    Args:
        hier: Nested hierarchy holding level and the coarse space V_H
        level: Target level index k+1
        lam: Eigenvalue approximation of the previous level
        u: Eigenfunction of level k (or of level k+1 itself)
        spec: Problem specification
        cfg: Scheme knobs
        parts: Assembled operators of the target level
        mg_ws: Stiffness multigrid workspace of the target level
        h: Mesh size used for the tolerances (max element diameter by default)

    Returns:
        (EigenPair on the target level, LevelWork)
    """
    cfg = cfg or MlcConfig()
    mesh = hier.meshes[level]
    parts = parts or OperatorParts.build(mesh, spec)
    h = max_diameter(mesh) if h is None else h
    times = {}

    start = time.perf_counter()
    u_bar = _lift(hier, level, u)
    rhs = aux_rhs(lam, FeFunction(mesh.level_id, u_bar), parts)
    if mg_ws is None:
        mg_ws = build_workspace(parts.stiffness, [hier.prolongations[k].matrix for k in range(1, level + 1)])
    mg = mg_solve(mg_ws, rhs, rel_tol=min(cfg.mg_c * h * h, 0.5), max_cycles=cfg.mg_max_cycles, level=level)
    u_tilde = u_bar + mg.x
    times["aux_solve"] = time.perf_counter() - start

    start = time.perf_counter()
    space = build_correction_space(hier, level, FeFunction(mesh.level_id, u_tilde), parts)
    times["space_build"] = time.perf_counter() - start

    start = time.perf_counter()
    initial = np.zeros(space.dim)
    initial[-1] = 1.0
    small = scf_solve(space.scf_problem(), cfg.composite_scf(h), initial)
    fine = normalize(space.expand(small.u.coeffs), parts.mass)
    times["coarse_eigensolve"] = time.perf_counter() - start

    Au = parts.operator(fine) @ fine
    lam_fine = float(fine @ Au)
    pair = EigenPair(lam=lam_fine, u=FeFunction(mesh.level_id, fine),
                     residual=float(np.linalg.norm(Au - lam_fine * (parts.mass @ fine))),
                     scf_iters=small.scf_iters, converged=small.converged)

    branch = hier.beta is not None and _mixed_sign(fine)
    if branch:
        log_correction_event(BRANCH_CAPTURE,
                             f"correction on level {level} returned a mixed-sign eigenvector",
                             level=level, context={"min": float(fine.min()), "max": float(fine.max())})

    work = LevelWork(level=level, n_dofs=parts.n_dofs, lam=lam_fine, vcycles=mg.cycles,
                     mg_residual=mg.residual, mg_converged=mg.converged,
                     scf_iters=small.scf_iters, scf_converged=small.converged,
                     guard_used=space.guard_used, branch_flag=branch, times=times)
    logger.info("correction level %d: %d dofs, lambda=%.10f, %d V-cycles, %d SCF iterations",
                level, parts.n_dofs, lam_fine, mg.cycles, small.scf_iters)
    return pair, work


def one_correction_step(
    hier: Hierarchy,
    level: int,
    lam: float,
    u: FeFunction,
    spec: ProblemSpec,
    cfg: Optional[MlcConfig] = None,
    **kwargs
) -> EigenPair:
    """Correction step returning only the new eigenpair."""
    pair, _ = correction_step(hier, level, lam, u, spec, cfg, **kwargs)
    return pair


def multigrid_scheme(
    hier: Hierarchy,
    spec: ProblemSpec,
    cfg: Optional[MlcConfig] = None,
    on_level: Optional[Callable[[int, EigenPair], None]] = None
):
    """
    Solve on the first level directly, then correct level by level up to the finest.

    Args:
        hier: Nested hierarchy; V_H is hier.coarse_index, h_1 is cfg.first_level
        spec: Problem specification
        cfg: Scheme knobs
        on_level: Called with (level index, EigenPair) after every level

    Returns:
        (EigenPair on the finest level, WorkReport)

    Raises:
        GpeMlcError: from any stage; the partial WorkReport is attached as `.report`
    """
    cfg = cfg or MlcConfig()
    first = cfg.first_level
    if not hier.coarse_index <= first < hier.n_levels:
        raise CompositeSpaceError(f"V_H level {hier.coarse_index} must not exceed the first level {first}")

    report = WorkReport(composite_dim=hier.meshes[hier.coarse_index].n_dofs + 1)
    try:
        start = time.perf_counter()
        pair = direct_solve(hier, first, spec, cfg.scf)
        report.levels.append(LevelWork(level=first, n_dofs=len(pair.u), lam=pair.lam,
                                       scf_iters=pair.scf_iters, scf_converged=pair.converged,
                                       times={"direct_solve": time.perf_counter() - start}))
        if on_level:
            on_level(first, pair)
        if hier.n_levels - 1 > first:
            finest = hier.n_levels - 1
            fine_parts = OperatorParts.build(hier.finest, spec)
            stiff_ws = build_workspace(fine_parts.stiffness,
                                       [hier.prolongations[k].matrix for k in range(1, finest + 1)])
            for level in range(first + 1, hier.n_levels):
                parts = fine_parts if level == finest else OperatorParts.build(hier.meshes[level], spec)
                pair, work = correction_step(hier, level, pair.lam, pair.u, spec, cfg, parts=parts,
                                             mg_ws=stiff_ws.truncated(level + 1))
                report.levels.append(work)
                if on_level:
                    on_level(level, pair)
    except GpeMlcError as e:
        e.report = report
        raise
    return pair, report


# Test
if __name__ == "__main__":
    from modules.mesh import build_unit_square, uniform_hierarchy

    hier = uniform_hierarchy(build_unit_square(6), 3)
    pair, report = multigrid_scheme(hier, ProblemSpec())
    print(f"lambda = {pair.lam:.10f} on {len(pair.u)} dofs")
    for w in report.levels:
        print(f"  level {w.level}: N={w.n_dofs}, vcycles={w.vcycles}, scf={w.scf_iters}")
