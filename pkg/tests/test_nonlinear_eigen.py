"""Tests for the pencil eigensolvers and the self-consistent field iteration."""

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.testing import assert_allclose

from modules.assembly import OperatorParts, energy
from modules.mesh import build_unit_square, uniform_hierarchy
from modules.multigrid import build_workspace
from modules.nonlinear_eigen import (
    ScfConfig, ScfProblem, dense_eigensolver, direct_solve, normalize,
    scf_solve, smallest_pair_dense, smallest_pair_iterative,
)
from utils.errors import ConfigError, EigenSolverError
from utils.logger import get_logger, EIGENSOLVER_NONCONVERGENCE, SCF_NONCONVERGENCE

from conftest import HARMONIC, laplace_parts

TWO_PI_SQ = 2.0 * np.pi ** 2


def laplace_hierarchy(n_levels: int):
    hier = uniform_hierarchy(build_unit_square(2), n_levels)
    parts = laplace_parts(hier.finest)
    ws = build_workspace(parts.stiffness, [P.matrix for P in hier.prolongations[1:]])
    return hier, parts, ws


def test_identity_pencil():
    M = OperatorParts.build(build_unit_square(4), HARMONIC).mass
    lam, vec = smallest_pair_dense(M, M)
    assert_allclose(lam, 1.0, rtol=1e-12)
    assert_allclose(vec @ (M @ vec), 1.0, rtol=1e-12)


def test_diagonal_pencil():
    lam, vec = smallest_pair_dense(np.diag([1.0, 2.0]), np.eye(2))
    assert_allclose(lam, 1.0)
    assert_allclose(np.abs(vec), [1.0, 0.0], atol=1e-14)


def test_dense_matches_full_eigendecomposition():
    parts = laplace_parts(build_unit_square(4))
    lam, _ = smallest_pair_dense(parts.stiffness, parts.mass)
    oracle = sla.eigvalsh(parts.stiffness.toarray(), parts.mass.toarray())[0]
    assert_allclose(lam, oracle, rtol=1e-10)


def test_dense_rejects_indefinite_mass():
    with pytest.raises(EigenSolverError):
        smallest_pair_dense(np.eye(2), np.diag([1.0, -1.0]))


def test_dense_rejects_inaccurate_solution(monkeypatch):
    monkeypatch.setattr(sla, "eigh", lambda A, M, subset_by_index=None: (np.array([1.0]), np.ones((3, 1))))
    with pytest.raises(EigenSolverError, match="residual"):
        smallest_pair_dense(np.diag([1.0, 2.0, 3.0]), np.eye(3))
    events = get_logger().get_audit_trail(EIGENSOLVER_NONCONVERGENCE)
    assert len(events) == 1
    assert events[0]["context"]["n"] == 3


def test_iterative_matches_dense():
    _, parts, ws = laplace_hierarchy(3)
    lam_dense, _ = smallest_pair_dense(parts.stiffness, parts.mass)
    lam, vec, stats = smallest_pair_iterative(parts.stiffness, parts.mass, ws)
    assert stats.converged
    assert abs(lam - lam_dense) <= 1e-8 * lam_dense
    assert_allclose(vec @ (parts.mass @ vec), 1.0, rtol=1e-12)


def test_iterative_independent_of_initial_guess(rng):
    _, parts, ws = laplace_hierarchy(3)
    lam_ones, _, _ = smallest_pair_iterative(parts.stiffness, parts.mass, ws)
    x0 = np.abs(rng.standard_normal(parts.n_dofs)) + 0.1
    lam_random, _, _ = smallest_pair_iterative(parts.stiffness, parts.mass, ws, x0=x0)
    assert abs(lam_ones - lam_random) <= 1e-10 * lam_ones


@pytest.mark.slow
def test_multigrid_preconditioning_saves_iterations():
    _, parts, ws = laplace_hierarchy(5)
    _, _, plain = smallest_pair_iterative(parts.stiffness, parts.mass, None)
    _, _, preconditioned = smallest_pair_iterative(parts.stiffness, parts.mass, ws)
    assert preconditioned.iterations * 3 <= plain.iterations


def test_normalize_conventions(rng):
    M = OperatorParts.build(build_unit_square(5), HARMONIC).mass
    u = rng.standard_normal(M.shape[0])
    out = normalize(u, M)
    assert_allclose(out @ (M @ out), 1.0, rtol=1e-13)
    assert_allclose(normalize(-u, M), out)
    assert np.ones(len(u)) @ (M @ out) >= 0.0
    positive = normalize(np.abs(u), M)
    assert_allclose(normalize(positive, M), positive, rtol=1e-14)
    with pytest.raises(EigenSolverError):
        normalize(np.zeros(M.shape[0]), M)


def test_linear_problem_solves_in_one_iteration():
    mesh = build_unit_square(6)
    parts = laplace_parts(mesh)
    pair = scf_solve(ScfProblem.from_parts(parts))
    lam, _ = smallest_pair_dense(parts.stiffness, parts.mass)
    assert pair.scf_iters == 1
    assert pair.converged
    assert_allclose(pair.lam, lam, rtol=1e-12)
    assert np.ones(parts.n_dofs) @ (parts.mass @ pair.u.coeffs) > 0.0


def test_laplace_eigenvalue_bounded_below_and_converging():
    hier = uniform_hierarchy(build_unit_square(4), 3)
    lams = []
    for k, mesh in enumerate(hier.meshes):
        lams.append(direct_solve(hier, k, HARMONIC, parts=laplace_parts(mesh)).lam)
    assert all(lam >= TWO_PI_SQ for lam in lams)
    assert lams[0] > lams[1] > lams[2]


@pytest.mark.slow
def test_laplace_eigenvalue_second_order():
    hier = uniform_hierarchy(build_unit_square(8), 4)
    lams = np.array([direct_solve(hier, k, HARMONIC, parts=laplace_parts(mesh)).lam
                     for k, mesh in enumerate(hier.meshes)])
    assert np.all(lams >= TWO_PI_SQ)
    errors = lams - TWO_PI_SQ
    orders = np.log2(errors[:-1] / errors[1:])
    assert np.all(np.abs(orders - 2.0) <= 0.3)


def test_ground_state_is_positive():
    hier = uniform_hierarchy(build_unit_square(6), 3)
    for k in range(3):
        pair = direct_solve(hier, k, HARMONIC)
        assert pair.u.coeffs.min() >= 0.0


def test_harmonic_trap_ground_state():
    hier = uniform_hierarchy(build_unit_square(4), 3)
    pairs = [direct_solve(hier, k, HARMONIC) for k in range(3)]
    for pair in pairs:
        assert pair.converged
        assert pair.residual < 1e-6
    energies = [energy(p.u, OperatorParts.build(hier.meshes[k], HARMONIC)) for k, p in enumerate(pairs)]
    assert energies[0] > energies[1] > energies[2]
    linear = direct_solve(hier, 2, HARMONIC, parts=laplace_parts(hier.finest)).lam
    assert pairs[2].lam > linear


def test_nonconvergence_returns_flagged_best_iterate():
    hier = uniform_hierarchy(build_unit_square(6), 1)
    parts = OperatorParts.build(hier.finest, HARMONIC)
    cfg = ScfConfig(max_iters=1)
    pair = scf_solve(ScfProblem.from_parts(parts), cfg, initial=np.ones(parts.n_dofs))
    assert not pair.converged
    assert pair.scf_iters == 1
    events = get_logger().get_audit_trail(SCF_NONCONVERGENCE)
    assert len(events) == 1


def test_warm_start_from_solution_needs_one_iteration():
    hier = uniform_hierarchy(build_unit_square(6), 1)
    parts = OperatorParts.build(hier.finest, HARMONIC)
    pair = direct_solve(hier, 0, HARMONIC, parts=parts)
    again = scf_solve(ScfProblem.from_parts(parts, dense_eigensolver), initial=pair.u)
    assert again.converged
    assert again.scf_iters <= 3
    assert_allclose(again.lam, pair.lam, rtol=1e-10)


@pytest.mark.slow
def test_iterative_direct_solve_matches_dense_path():
    hier = uniform_hierarchy(build_unit_square(4), 4)
    parts = OperatorParts.build(hier.finest, HARMONIC)
    assert parts.n_dofs > 600
    iterative = direct_solve(hier, 3, HARMONIC, parts=parts)
    dense = scf_solve(ScfProblem.from_parts(parts, dense_eigensolver))
    assert iterative.converged and dense.converged
    assert abs(iterative.lam - dense.lam) <= 1e-7 * dense.lam


def test_empty_level_rejected():
    hier = uniform_hierarchy(build_unit_square(1), 1)
    with pytest.raises(EigenSolverError):
        direct_solve(hier, 0, HARMONIC)


@pytest.mark.parametrize("kwargs, field", [
    ({"mixing": 0.0}, "scf_mixing"),
    ({"lambda_tol": -1.0}, "scf_lambda_tol"),
    ({"max_iters": 0}, "scf_max_iters"),
])
def test_scf_config_validation(kwargs, field):
    with pytest.raises(ConfigError) as excinfo:
        ScfConfig(**kwargs)
    assert excinfo.value.field == field


def test_scf_accepts_sparse_and_dense_blocks():
    parts = laplace_parts(build_unit_square(3))
    dense_problem = ScfProblem(linear=parts.linear.toarray(), mass=parts.mass.toarray(),
                               nonlinear=lambda u: sp.csr_matrix(parts.linear.shape), zeta=0.0,
                               level_id=0, eigensolver=dense_eigensolver)
    sparse_pair = scf_solve(ScfProblem.from_parts(parts))
    dense_pair = scf_solve(dense_problem)
    assert_allclose(dense_pair.lam, sparse_pair.lam, rtol=1e-12)
