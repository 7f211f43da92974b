"""
Module 8: Experiment Harness
Runs uniform convergence studies (multilevel correction, direct baseline or both)
and the adaptive ZZ/Dörfler loop, measures errors against a cached reference
solution and writes table.csv, report.json and mesh files.
"""

import os
import sys
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import CACHE_DIR, SCHEMA_VERSION, TABLE_FILENAME, REPORT_FILENAME
from modules.assembly import FeFunction, OperatorParts
from modules.estimators import zz_estimate, dorfler_mark
from modules.mesh import (
    DOMAIN_AREAS, L_SHAPE, Hierarchy, Mesh,
    bisect_marked, build_lshape, build_unit_square, composite_prolongation,
    element_diameters, export_mesh, max_diameter, refine_regular, uniform_hierarchy,
)
from modules.mlc import MlcConfig, correction_step, multigrid_scheme
from modules.nonlinear_eigen import EigenPair, direct_solve
from modules.run_config import RunConfig, RunMode, ReferenceMode
from utils.errors import ConfigError, GpeMlcError, MeshError
from utils.helpers import observed_order, write_report_json, write_table_csv
from utils.logger import get_progress_logger, log_harness_event, REFERENCE_CACHE, REFERENCE_ORDER

logger = get_progress_logger("harness")

EXIT_OK = 0
EXIT_NOT_CONVERGED = 1
EXIT_CONFIG = 2

# three-level order of the reference eigenvalues tolerated around 2
REFERENCE_ORDER_SLACK = 0.5

UNIFORM_COLUMNS = [
    "level", "n_dofs", "h",
    "lambda_mlc", "lambda_err_mlc", "lambda_order_mlc", "h1_err_mlc", "h1_order_mlc",
    "l2_err_mlc", "l2_order_mlc", "scf_iters_mlc", "vcycles_mlc",
    "lambda_direct", "lambda_err_direct", "lambda_order_direct", "h1_err_direct", "h1_order_direct",
    "l2_err_direct", "l2_order_direct", "scf_iters_direct",
    "error_ratio",
]

ADAPTIVE_COLUMNS = [
    "iteration", "n_dofs", "n_triangles", "lambda", "lambda_err", "lambda_dof_rate",
    "h1_err", "l2_err", "estimator", "estimator_dof_rate", "scf_iters", "vcycles",
    "corner_diameter", "max_diameter",
]


@dataclass
class ErrorRecord:
    """Errors of one solve against the reference."""
    method: str
    level: int
    n_dofs: int
    h: float
    lam: float
    scf_iters: int
    converged: bool = True
    lambda_error: Optional[float] = None
    h1_error: Optional[float] = None
    l2_error: Optional[float] = None
    lambda_order: Optional[float] = None
    h1_order: Optional[float] = None
    l2_order: Optional[float] = None
    vcycles: Optional[int] = None
    estimator: Optional[float] = None
    n_triangles: Optional[int] = None
    corner_diameter: Optional[float] = None
    lambda_dof_rate: Optional[float] = None
    estimator_dof_rate: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "method": self.method, "level": self.level, "n_dofs": self.n_dofs, "h": self.h,
            "lambda": self.lam, "lambda_error": self.lambda_error, "h1_error": self.h1_error,
            "l2_error": self.l2_error, "lambda_order": self.lambda_order, "h1_order": self.h1_order,
            "l2_order": self.l2_order, "scf_iters": self.scf_iters, "converged": self.converged,
            "vcycles": self.vcycles, "estimator": self.estimator, "n_triangles": self.n_triangles,
            "corner_diameter": self.corner_diameter, "lambda_dof_rate": self.lambda_dof_rate,
            "estimator_dof_rate": self.estimator_dof_rate,
        }


@dataclass
class ConvergenceTable:
    columns: List[str]
    rows: List[Dict] = field(default_factory=list)

    def column(self, name: str) -> list:
        return [row.get(name) for row in self.rows]

    def write_csv(self, path: str):
        write_table_csv(path, self.columns, self.rows)


@dataclass(eq=False)
class ReferenceSolution:
    """Reference eigenpair on a hierarchy that extends the run's meshes."""
    lam: float
    lam_raw: float
    lam_coarser: Optional[float]
    u: FeFunction
    hier: Hierarchy
    level: int
    parts: OperatorParts
    richardson: bool
    cache_status: str = "computed"
    lam_second: Optional[float] = None
    richardson_order: Optional[float] = None

    def function_errors(self, level: int, u: FeFunction):
        """(H1 seminorm, L2) errors of u on hierarchy level `level`."""
        P = composite_prolongation(self.hier, level, self.level)
        e = P.apply(u.coeffs) - self.u.coeffs
        h1 = float(np.sqrt(max(e @ (self.parts.stiffness @ e), 0.0)))
        l2 = float(np.sqrt(max(e @ (self.parts.mass @ e), 0.0)))
        return h1, l2

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "lambda_raw": self.lam_raw, "lambda_coarser": self.lam_coarser,
                "lambda_second": self.lam_second, "richardson": self.richardson,
                "richardson_order": self.richardson_order, "level": self.level, "n_dofs": len(self.u)}


@dataclass
class AdaptiveResult:
    hier: Hierarchy
    pairs: List[EigenPair]
    estimators: List[float]
    works: list
    stopped_early: bool = False
    failure: Optional[Dict] = None


@dataclass
class RunResult:
    table: ConvergenceTable
    report: Dict
    exit_code: int


# ---------------------------------------------------------------------------
# Meshes and references
# ---------------------------------------------------------------------------

def build_base_mesh(domain: str, n: int) -> Mesh:
    return build_lshape(n) if domain == L_SHAPE else build_unit_square(n)


def build_hierarchy(cfg: RunConfig, levels: Optional[int] = None) -> Hierarchy:
    """Uniform hierarchy h_1..h_n, preceded by h_0 when coarse_level = 1."""
    levels = cfg.levels if levels is None else levels
    if cfg.coarse_level == 1:
        base = build_base_mesh(cfg.domain, cfg.base_n // 2)
        return uniform_hierarchy(base, levels + 1, coarse_index=0)
    return uniform_hierarchy(build_base_mesh(cfg.domain, cfg.base_n), levels, coarse_index=0)


def extend_hierarchy(hier: Hierarchy) -> Hierarchy:
    """Copy of hier with one more uniform refinement of its finest mesh."""
    fine, prolongation = refine_regular(hier.finest)
    extended = Hierarchy(meshes=list(hier.meshes), prolongations=list(hier.prolongations),
                         coarse_index=hier.coarse_index, beta=hier.beta)
    extended.append(fine, prolongation)
    return extended


def mlc_config(cfg: RunConfig) -> MlcConfig:
    return MlcConfig(scf=cfg.scf, mg_c=cfg.mg_c, scf_factor=cfg.mlc_scf_factor,
                     mixing=cfg.mlc_mixing, first_level=cfg.coarse_level)


def _cache_dir(cache_dir: Optional[str]) -> str:
    return cache_dir or os.getenv("GPE_MLC_CACHE_DIR", CACHE_DIR)


REQUIRED_REFERENCE_KEYS = ("lam_raw", "coeffs")


def _load_cached(path: str, expected_hash: Optional[str], n_dofs: int) -> Optional[dict]:
    """Cached reference arrays, or None on a missing file, missing keys or any mismatch."""
    if not os.path.isfile(path):
        return None
    try:
        with np.load(path) as data:
            cached = {k: data[k] for k in data.files}
    except (OSError, ValueError):
        return None
    if any(k not in cached for k in REQUIRED_REFERENCE_KEYS):
        return None
    if expected_hash is not None and str(cached.get("config_hash")) != expected_hash:
        return None
    if cached["coeffs"].shape != (n_dofs,):
        return None
    return cached


def _optional_float(cached: dict, key: str) -> Optional[float]:
    value = float(cached[key]) if key in cached else np.nan
    return None if np.isnan(value) else value


def _check_reference_order(lam_second: Optional[float], lam_coarser: Optional[float],
                           lam_raw: float, level: int) -> Optional[float]:
    """Observed order of three consecutive reference eigenvalues; logged when far from 2."""
    if lam_second is None or lam_coarser is None:
        return None
    order = observed_order(lam_second - lam_coarser, lam_coarser - lam_raw)
    if order is None or abs(order - 2.0) > REFERENCE_ORDER_SLACK:
        log_harness_event(REFERENCE_ORDER,
                          f"reference eigenvalues {lam_second:.10f}, {lam_coarser:.10f}, {lam_raw:.10f} "
                          f"are not in the asymptotic range",
                          level=level, context={"order": order})
    return order


def _solve_reference(
    ref_hier: Hierarchy,
    cfg: RunConfig,
    coarser_level: Optional[int],
    key: str,
    cache_dir: Optional[str],
    richardson: bool,
    second_level: Optional[int] = None
) -> ReferenceSolution:
    spec = cfg.spec
    level = ref_hier.n_levels - 1
    parts = OperatorParts.build(ref_hier.meshes[level], spec)

    if cfg.reference_mode is ReferenceMode.FILE:
        cached = _load_cached(cfg.reference_file, None, parts.n_dofs)
        if cached is None:
            raise ConfigError("reference_file",
                              f"unreadable or mismatched reference file {cfg.reference_file} "
                              f"(needs {', '.join(REQUIRED_REFERENCE_KEYS)} with {parts.n_dofs} dofs)")
        status = "file"
    else:
        path = os.path.join(_cache_dir(cache_dir), f"reference_{key}.npz")
        cached = _load_cached(path, key, parts.n_dofs)
        status = "hit" if cached is not None else ("mismatch" if os.path.isfile(path) else "miss")
        log_harness_event(REFERENCE_CACHE, f"reference cache {status}: {path}", level=level)

    if cached is None:
        initial = None
        lam_second = lam_coarser = None
        if coarser_level is not None:
            if second_level is not None:
                second = direct_solve(ref_hier, second_level, spec, cfg.scf)
                lam_second = second.lam
                initial = composite_prolongation(ref_hier, second_level, coarser_level).apply(second.u.coeffs)
            coarse = direct_solve(ref_hier, coarser_level, spec, cfg.scf, initial=initial)
            lam_coarser = coarse.lam
            initial = composite_prolongation(ref_hier, coarser_level, level).apply(coarse.u.coeffs)
        pair = direct_solve(ref_hier, level, spec, cfg.scf, parts=parts, initial=initial)
        lam_raw = pair.lam
        coeffs = pair.u.coeffs
        os.makedirs(_cache_dir(cache_dir), exist_ok=True)
        np.savez(os.path.join(_cache_dir(cache_dir), f"reference_{key}.npz"),
                 lam_raw=lam_raw, lam_coarser=np.nan if lam_coarser is None else lam_coarser,
                 lam_second=np.nan if lam_second is None else lam_second,
                 coeffs=coeffs, config_hash=key)
    else:
        lam_raw = float(cached["lam_raw"])
        lam_coarser = _optional_float(cached, "lam_coarser")
        lam_second = _optional_float(cached, "lam_second")
        coeffs = cached["coeffs"]

    lam = lam_raw
    if richardson and lam_coarser is not None:
        lam = lam_raw + (lam_raw - lam_coarser) / 3.0
    order = _check_reference_order(lam_second, lam_coarser, lam_raw, level) if richardson else None
    return ReferenceSolution(lam=lam, lam_raw=lam_raw, lam_coarser=lam_coarser,
                             u=FeFunction(ref_hier.meshes[level].level_id, np.asarray(coeffs, dtype=float)),
                             hier=ref_hier, level=level, parts=parts,
                             richardson=richardson and lam_coarser is not None, cache_status=status,
                             lam_second=lam_second, richardson_order=order)


def reference_solve(cfg: RunConfig, hier: Optional[Hierarchy] = None, cache_dir: Optional[str] = None) -> ReferenceSolution:
    """
    Direct solve on one uniform refinement beyond the finest level.

    The result is cached under GPE_MLC_CACHE_DIR keyed by the config hash; a
    missing or mismatched cache entry forces a recompute. With
    reference_richardson the eigenvalue is extrapolated from the finest and
    the extra level (ratio 4 for beta = 2), and the two finest run levels
    plus the extra level give an observed order that should be close to 2.
    """
    hier = hier or build_hierarchy(cfg)
    ref_hier = extend_hierarchy(hier)
    finest = hier.n_levels - 1
    return _solve_reference(ref_hier, cfg, coarser_level=finest, key=cfg.problem_hash(),
                            cache_dir=cache_dir, richardson=cfg.reference_richardson,
                            second_level=finest - 1 if finest >= 1 else None)


def adaptive_reference_key(cfg: RunConfig) -> str:
    """The adaptive meshes depend on the correction knobs, so they enter the key."""
    return (f"{cfg.problem_hash()}_adaptive_{cfg.dorfler_theta:g}_{cfg.adaptive_iterations}"
            f"_{cfg.mg_c:g}_{cfg.mlc_scf_factor:g}_{cfg.mlc_mixing:g}")


def adaptive_reference(cfg: RunConfig, hier: Hierarchy, cache_dir: Optional[str] = None) -> ReferenceSolution:
    """Direct solve on the uniform refinement of the final adaptive mesh (no extrapolation)."""
    ref_hier = extend_hierarchy(hier)
    return _solve_reference(ref_hier, cfg, coarser_level=hier.n_levels - 1, key=adaptive_reference_key(cfg),
                            cache_dir=cache_dir, richardson=False)


# ---------------------------------------------------------------------------
# Uniform studies
# ---------------------------------------------------------------------------

def _record(method: str, level: int, mesh: Mesh, pair: EigenPair, ref: ReferenceSolution) -> ErrorRecord:
    h1, l2 = ref.function_errors(level, pair.u)
    return ErrorRecord(method=method, level=level, n_dofs=len(pair.u), h=max_diameter(mesh),
                       lam=pair.lam, scf_iters=pair.scf_iters, converged=pair.converged,
                       lambda_error=abs(pair.lam - ref.lam), h1_error=h1, l2_error=l2,
                       n_triangles=mesh.n_triangles)


def convergence_table(records: List[ErrorRecord], uniform: bool = True) -> List[ErrorRecord]:
    """
    Fill observed orders between consecutive records.

    Uniform runs get log2 error ratios; adaptive runs get dof-based rates
    (error ~ N^-rate) instead.
    """
    for prev, cur in zip(records, records[1:]):
        if uniform:
            cur.lambda_order = observed_order(prev.lambda_error, cur.lambda_error)
            cur.h1_order = observed_order(prev.h1_error, cur.h1_error)
            cur.l2_order = observed_order(prev.l2_error, cur.l2_error)
        elif cur.n_dofs > prev.n_dofs:
            dof_ratio = cur.n_dofs / prev.n_dofs
            cur.lambda_dof_rate = observed_order(prev.lambda_error, cur.lambda_error, dof_ratio)
            cur.estimator_dof_rate = observed_order(prev.estimator, cur.estimator, dof_ratio)
    return records


def _mlc_records(hier: Hierarchy, pairs: Dict[int, EigenPair], work, ref: ReferenceSolution) -> List[ErrorRecord]:
    records = [_record("mlc", k, hier.meshes[k], pairs[k], ref) for k in sorted(pairs)]
    for rec, level_work in zip(records, work.levels if work is not None else []):
        rec.vcycles = level_work.vcycles
    return convergence_table(records)


def run_mlc(cfg: RunConfig, hier: Hierarchy, ref: ReferenceSolution):
    """
    Multilevel correction on every level; returns (records, WorkReport).

    A solver error keeps the records of the finished levels as `.records`
    next to the partial WorkReport in `.report`.
    """
    pairs = {}
    try:
        _, work = multigrid_scheme(hier, cfg.spec, mlc_config(cfg), on_level=lambda k, p: pairs.__setitem__(k, p))
    except GpeMlcError as e:
        e.records = _mlc_records(hier, pairs, getattr(e, "report", None), ref)
        raise
    return _mlc_records(hier, pairs, work, ref), work


def run_direct(cfg: RunConfig, hier: Hierarchy, ref: ReferenceSolution):
    """Direct solve on every level, warm-started from the prolonged coarser solution."""
    records, times = [], []
    initial = None
    try:
        for k in range(cfg.coarse_level, hier.n_levels):
            start = time.perf_counter()
            pair = direct_solve(hier, k, cfg.spec, cfg.scf, initial=initial)
            times.append({"level": k, "direct_solve": time.perf_counter() - start})
            records.append(_record("direct", k, hier.meshes[k], pair, ref))
            if k + 1 < hier.n_levels:
                initial = hier.prolongations[k + 1].apply(pair.u.coeffs)
    except GpeMlcError as e:
        e.records, e.times = convergence_table(records), times
        raise
    return convergence_table(records), times


def _uniform_rows(mlc: Optional[List[ErrorRecord]], direct: Optional[List[ErrorRecord]]) -> List[Dict]:
    by_level: Dict[int, Dict] = {}
    for suffix, records in (("mlc", mlc), ("direct", direct)):
        for rec in records or []:
            row = by_level.setdefault(rec.level, {"level": rec.level, "n_dofs": rec.n_dofs, "h": rec.h})
            row[f"lambda_{suffix}"] = rec.lam
            row[f"lambda_err_{suffix}"] = rec.lambda_error
            row[f"lambda_order_{suffix}"] = rec.lambda_order
            row[f"h1_err_{suffix}"] = rec.h1_error
            row[f"h1_order_{suffix}"] = rec.h1_order
            row[f"l2_err_{suffix}"] = rec.l2_error
            row[f"l2_order_{suffix}"] = rec.l2_order
            row[f"scf_iters_{suffix}"] = rec.scf_iters
            if suffix == "mlc":
                row["vcycles_mlc"] = rec.vcycles
    for row in by_level.values():
        mlc_err, direct_err = row.get("lambda_err_mlc"), row.get("lambda_err_direct")
        if mlc_err is not None and direct_err:
            row["error_ratio"] = mlc_err / direct_err
    return [by_level[k] for k in sorted(by_level)]


# ---------------------------------------------------------------------------
# Adaptive studies
# ---------------------------------------------------------------------------

def corner_diameter(mesh: Mesh) -> Optional[float]:
    """Smallest diameter among triangles touching the origin (the reentrant corner)."""
    at_origin = np.flatnonzero(np.all(np.abs(mesh.vertices) <= 1e-12, axis=1))
    if not len(at_origin):
        return None
    touching = np.any(mesh.triangles == at_origin[0], axis=1)
    return float(element_diameters(mesh)[touching].min())


def adaptive_loop(cfg: RunConfig) -> AdaptiveResult:
    """
    Adaptive refinement driven by ZZ indicators and Dörfler marking.

    Iteration 0 solves on the base mesh directly; every further iteration
    marks, bisects and applies one correction step with V_H fixed to the base
    mesh. Refinement failures and solver errors in a correction step end the
    loop early; the error of the latter is kept in `failure`.
    """
    spec = cfg.spec
    base = build_base_mesh(cfg.domain, cfg.base_n)
    hier = Hierarchy(meshes=[base], prolongations=[None], coarse_index=0, beta=None)
    scheme = replace(mlc_config(cfg), first_level=0)

    pair = direct_solve(hier, 0, spec, cfg.scf)
    indicators = zz_estimate(base, pair.u)
    result = AdaptiveResult(hier=hier, pairs=[pair], estimators=[indicators.total], works=[None])
    area = DOMAIN_AREAS[cfg.domain]

    for iteration in range(1, cfg.adaptive_iterations + 1):
        marked = dorfler_mark(indicators, cfg.dorfler_theta)
        try:
            fine, prolongation = bisect_marked(hier.finest, marked)
        except MeshError as e:
            logger.warning("adaptive iteration %d: refinement failed (%s); stopping", iteration, e)
            result.stopped_early = True
            break
        hier.append(fine, prolongation)
        h_eff = float(np.sqrt(area / fine.n_dofs))
        try:
            pair, work = correction_step(hier, hier.n_levels - 1, pair.lam, pair.u, spec, scheme, h=h_eff)
        except GpeMlcError as e:
            logger.warning("adaptive iteration %d: correction failed (%s); stopping", iteration, e)
            del hier.meshes[-1], hier.prolongations[-1]
            result.failure = failure_record(f"adaptive iteration {iteration}", e)
            result.stopped_early = True
            break
        indicators = zz_estimate(fine, pair.u)
        result.pairs.append(pair)
        result.estimators.append(indicators.total)
        result.works.append(work)
        logger.info("adaptive iteration %d: %d dofs, lambda=%.10f, eta=%.4e",
                    iteration, fine.n_dofs, pair.lam, indicators.total)
    return result


def adaptive_records(result: AdaptiveResult, ref: ReferenceSolution) -> List[ErrorRecord]:
    records = []
    for it, (pair, eta, work) in enumerate(zip(result.pairs, result.estimators, result.works)):
        mesh = result.hier.meshes[it]
        rec = _record("adaptive", it, mesh, pair, ref)
        rec.estimator = eta
        rec.vcycles = work.vcycles if work is not None else 0
        rec.corner_diameter = corner_diameter(mesh)
        records.append(rec)
    return convergence_table(records, uniform=False)


def compare_adaptive_uniform(
    cfg: RunConfig,
    records: List[ErrorRecord],
    ref: ReferenceSolution,
    from_iteration: int = 10
) -> Dict:
    """
    Compare adaptive and uniform eigenvalue errors at matched dof counts.

    Uniform direct solves run on the same base mesh until they pass the final
    adaptive dof count; their errors (against the adaptive reference) are
    interpolated log-log at each adaptive dof count from `from_iteration` on.
    """
    target = records[-1].n_dofs
    hier = uniform_hierarchy(build_base_mesh(cfg.domain, cfg.base_n), 1)
    uniform = []
    initial = None
    while True:
        k = hier.n_levels - 1
        pair = direct_solve(hier, k, cfg.spec, cfg.scf, initial=initial)
        uniform.append({"n_dofs": len(pair.u), "lambda": pair.lam, "lambda_error": abs(pair.lam - ref.lam)})
        if len(pair.u) >= target and len(uniform) >= 2:
            break
        fine, prolongation = refine_regular(hier.finest)
        hier.append(fine, prolongation)
        initial = prolongation.apply(pair.u.coeffs)

    log_n = np.log([u["n_dofs"] for u in uniform])
    log_e = np.log([max(u["lambda_error"], 1e-300) for u in uniform])
    matched = []
    for rec in records:
        if rec.level < min(from_iteration, len(records) - 1):
            continue
        x = np.log(rec.n_dofs)
        j = int(np.clip(np.searchsorted(log_n, x), 1, len(log_n) - 1))
        slope = (log_e[j] - log_e[j - 1]) / (log_n[j] - log_n[j - 1])
        uniform_error = float(np.exp(log_e[j - 1] + slope * (x - log_n[j - 1])))
        matched.append({"iteration": rec.level, "n_dofs": rec.n_dofs,
                        "adaptive_error": rec.lambda_error, "uniform_error": uniform_error})
    return {
        "uniform": uniform,
        "matched": matched,
        "adaptive_not_worse": all(m["adaptive_error"] <= m["uniform_error"] for m in matched),
    }


def _adaptive_rows(records: List[ErrorRecord]) -> List[Dict]:
    return [{
        "iteration": r.level, "n_dofs": r.n_dofs, "n_triangles": r.n_triangles, "lambda": r.lam,
        "lambda_err": r.lambda_error, "lambda_dof_rate": r.lambda_dof_rate, "h1_err": r.h1_error,
        "l2_err": r.l2_error, "estimator": r.estimator, "estimator_dof_rate": r.estimator_dof_rate,
        "scf_iters": r.scf_iters, "vcycles": r.vcycles, "corner_diameter": r.corner_diameter,
        "max_diameter": r.h,
    } for r in records]


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _export_meshes(out_dir: str, meshes: List[Mesh], prefix: str):
    mesh_dir = os.path.join(out_dir, "meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    for k, mesh in enumerate(meshes):
        export_mesh(mesh, os.path.join(mesh_dir, f"{prefix}_{k:02d}.txt"))


def failure_record(stage: str, error: GpeMlcError) -> Dict:
    """Report entry of a solver error, with the partial work report when the stage attached one."""
    partial = getattr(error, "report", None)
    return {"stage": stage, "error": type(error).__name__, "message": str(error),
            "partial_work": partial.to_dict() if partial is not None else None}


def _run_adaptive(cfg: RunConfig, cache_dir: Optional[str], report: Dict, timing: Dict, failures: List[Dict]):
    start = time.perf_counter()
    try:
        result = adaptive_loop(cfg)
    except ConfigError:
        raise
    except GpeMlcError as e:
        failures.append(failure_record("adaptive", e))
        return None, ConvergenceTable(columns=ADAPTIVE_COLUMNS), [], True
    timing["adaptive_seconds"] = time.perf_counter() - start
    if result.failure is not None:
        failures.append(result.failure)

    start = time.perf_counter()
    try:
        ref = adaptive_reference(cfg, result.hier, cache_dir)
    except ConfigError:
        raise
    except GpeMlcError as e:
        failures.append(failure_record("reference", e))
        return None, ConvergenceTable(columns=ADAPTIVE_COLUMNS), result.hier.meshes, True
    timing["reference_seconds"] = time.perf_counter() - start

    records = adaptive_records(result, ref)
    converged = all(r.converged for r in records) and all(
        w.mg_converged for w in result.works if w is not None)
    section = {
        "records": [r.to_dict() for r in records],
        "stopped_early": result.stopped_early,
        "work": [w.to_dict() for w in result.works if w is not None],
    }
    try:
        section["comparison"] = compare_adaptive_uniform(cfg, records, ref)
    except ConfigError:
        raise
    except GpeMlcError as e:
        failures.append(failure_record("comparison", e))
    report["adaptive"] = section
    table = ConvergenceTable(columns=ADAPTIVE_COLUMNS, rows=_adaptive_rows(records))
    return ref, table, result.hier.meshes, converged


def _run_uniform(cfg: RunConfig, cache_dir: Optional[str], report: Dict, timing: Dict, failures: List[Dict]):
    hier = build_hierarchy(cfg)
    start = time.perf_counter()
    try:
        ref = reference_solve(cfg, hier, cache_dir)
    except ConfigError:
        raise
    except GpeMlcError as e:
        failures.append(failure_record("reference", e))
        return None, ConvergenceTable(columns=UNIFORM_COLUMNS), hier.meshes, True
    timing["reference_seconds"] = time.perf_counter() - start

    converged = True
    mlc_records = direct_records = None
    if cfg.mode in (RunMode.MLC, RunMode.BOTH):
        try:
            mlc_records, work = run_mlc(cfg, hier, ref)
            converged &= work.converged and all(r.converged for r in mlc_records)
        except ConfigError:
            raise
        except GpeMlcError as e:
            failures.append(failure_record("mlc", e))
            mlc_records, work = getattr(e, "records", []), getattr(e, "report", None)
        report["mlc"] = {"records": [r.to_dict() for r in mlc_records],
                         "work": work.to_dict() if work is not None else None}
        if work is not None:
            timing["mlc"] = work.timing()
    if cfg.mode in (RunMode.DIRECT, RunMode.BOTH):
        try:
            direct_records, direct_times = run_direct(cfg, hier, ref)
            converged &= all(r.converged for r in direct_records)
        except ConfigError:
            raise
        except GpeMlcError as e:
            failures.append(failure_record("direct", e))
            direct_records, direct_times = getattr(e, "records", []), getattr(e, "times", [])
        report["direct"] = {"records": [r.to_dict() for r in direct_records]}
        timing["direct"] = {"levels": direct_times,
                            "total_seconds": sum(t["direct_solve"] for t in direct_times)}
    table = ConvergenceTable(columns=UNIFORM_COLUMNS, rows=_uniform_rows(mlc_records, direct_records))
    return ref, table, hier.meshes, converged


def run(cfg: RunConfig, cache_dir: Optional[str] = None, write: bool = True) -> RunResult:
    """
    Execute the configured mode and write table.csv, report.json and meshes.

    Solver errors do not escape: each one is recorded under report["failures"]
    with its stage and any partial work, the finished levels are still
    written, and the exit code becomes 1. Configuration errors propagate.

    Returns:
        RunResult with exit code 0 when every solve converged, 1 otherwise
    """
    report: Dict = {"schema_version": SCHEMA_VERSION, "config": cfg.to_dict(),
                    "config_hash": cfg.problem_hash()}
    timing: Dict = {}
    failures: List[Dict] = []

    if cfg.mode is RunMode.ADAPTIVE:
        ref, table, meshes, converged = _run_adaptive(cfg, cache_dir, report, timing, failures)
        prefix = "adaptive"
    else:
        ref, table, meshes, converged = _run_uniform(cfg, cache_dir, report, timing, failures)
        prefix = "level"

    converged = converged and not failures
    if ref is not None:
        timing["reference_cache"] = ref.cache_status
    report["reference"] = ref.to_dict() if ref is not None else None
    report["failures"] = failures
    report["converged"] = bool(converged)
    exit_code = EXIT_OK if converged else EXIT_NOT_CONVERGED
    report["exit_code"] = exit_code
    report["timing"] = timing

    if write:
        os.makedirs(cfg.out_dir, exist_ok=True)
        table.write_csv(os.path.join(cfg.out_dir, TABLE_FILENAME))
        write_report_json(os.path.join(cfg.out_dir, REPORT_FILENAME), report)
        if cfg.export_meshes:
            _export_meshes(cfg.out_dir, meshes, prefix)
    for failure in failures:
        logger.error("%s failed: %s: %s", failure["stage"], failure["error"], failure["message"])
    logger.info("run finished: mode=%s converged=%s", cfg.mode.value, converged)
    return RunResult(table=table, report=report, exit_code=exit_code)
