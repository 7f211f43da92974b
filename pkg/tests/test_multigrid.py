"""Tests for the geometric multigrid V-cycle."""

import numpy as np
import pytest
import scipy.sparse.linalg as spla
from numpy.testing import assert_allclose

from modules.assembly import assemble_mass, assemble_stiffness
from modules.mesh import build_lshape, build_unit_square, uniform_hierarchy
from modules.multigrid import build_workspace, cycle_cost, preconditioner, solve, vcycle
from utils.errors import MultigridError
from utils.logger import get_logger, MG_NONCONVERGENCE


def poisson_workspace(base_n: int, depth: int, builder=build_unit_square):
    hier = uniform_hierarchy(builder(base_n), depth)
    K = assemble_stiffness(hier.finest)
    ws = build_workspace(K, [P.matrix for P in hier.prolongations[1:]])
    return hier, K, ws


def energy_norm(K, e):
    return float(np.sqrt(e @ (K @ e)))


def contraction_factor(base_n: int, depth: int, rng, cycles: int = 6) -> float:
    _, K, ws = poisson_workspace(base_n, depth)
    b = rng.standard_normal(K.shape[0])
    exact = spla.spsolve(K.tocsc(), b)
    x = np.zeros_like(b)
    ratio = 0.0
    for _ in range(cycles):
        before = energy_norm(K, x - exact)
        x = vcycle(ws, b, x)
        ratio = energy_norm(K, x - exact) / before
    return ratio


def test_zero_rhs_zero_guess_is_fixed():
    _, K, ws = poisson_workspace(2, 3)
    assert_allclose(vcycle(ws, np.zeros(K.shape[0])), 0.0)


def test_exact_solution_is_fixed(rng):
    _, K, ws = poisson_workspace(2, 3)
    exact = rng.standard_normal(K.shape[0])
    b = K @ exact
    assert_allclose(vcycle(ws, b, exact), exact, atol=1e-12)


def test_energy_contraction(rng):
    factor = contraction_factor(2, 4, rng)
    assert factor <= 0.25


@pytest.mark.slow
def test_contraction_independent_of_depth(rng):
    factors = [contraction_factor(2, depth, rng) for depth in range(3, 7)]
    assert max(factors) <= 0.25
    assert max(factors) - min(factors) < 0.1


def test_solve_reaches_tolerance_in_few_cycles(rng):
    _, K, ws = poisson_workspace(2, 3)
    b = rng.standard_normal(K.shape[0])
    result = solve(ws, b, rel_tol=1e-10)
    assert result.converged
    assert result.cycles <= 10
    assert np.linalg.norm(b - K @ result.x) <= 1e-10 * np.linalg.norm(b)


def test_zero_rhs_needs_no_cycles():
    _, K, ws = poisson_workspace(2, 3)
    result = solve(ws, np.zeros(K.shape[0]), rel_tol=1e-8)
    assert result.cycles == 0
    assert_allclose(result.x, 0.0)


def test_manufactured_solution_converges_quadratically():
    exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    errors = []
    for depth in (3, 4, 5):
        hier, K, ws = poisson_workspace(2, depth)
        mesh = hier.finest
        M = assemble_mass(mesh)
        b = M @ (2.0 * np.pi ** 2 * mesh.interpolate(exact))
        x = solve(ws, b, rel_tol=1e-12).x
        e = x - mesh.interpolate(exact)
        errors.append(np.sqrt(e @ (M @ e)))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all((orders > 1.7) & (orders < 2.3))


def test_cycle_cap_is_reported(rng, isolated_dirs):
    _, K, ws = poisson_workspace(2, 4)
    result = solve(ws, rng.standard_normal(K.shape[0]), rel_tol=1e-14, max_cycles=1, level=3)
    assert not result.converged
    assert result.cycles == 1
    events = get_logger().get_audit_trail(MG_NONCONVERGENCE)
    assert events and events[0]["level"] == 3


def test_cycle_cost_is_linear_in_nnz():
    for depth in (3, 5):
        _, K, ws = poisson_workspace(2, depth)
        assert cycle_cost(ws) <= 20 * K.nnz


def test_preconditioner_is_symmetric(rng):
    _, K, ws = poisson_workspace(3, 3)
    B = preconditioner(ws)
    x, y = rng.standard_normal((2, K.shape[0]))
    assert_allclose(x @ B.matvec(y), y @ B.matvec(x), rtol=1e-10)
    assert x @ B.matvec(x) > 0.0


def test_truncated_workspace_shares_levels():
    _, K, ws = poisson_workspace(2, 4)
    coarse = ws.truncated(2)
    assert coarse.n_levels == 2
    assert coarse.matrices[1] is ws.matrices[1]
    assert coarse.coarse_factor is ws.coarse_factor
    with pytest.raises(MultigridError):
        ws.truncated(0)


def test_lshape_hierarchy(rng):
    _, K, ws = poisson_workspace(2, 4, builder=build_lshape)
    b = rng.standard_normal(K.shape[0])
    result = solve(ws, b, rel_tol=1e-8)
    assert result.converged
    assert result.cycles <= 15


def test_shape_mismatch_rejected():
    _, K, ws = poisson_workspace(2, 3)
    with pytest.raises(MultigridError):
        vcycle(ws, np.ones(K.shape[0] + 1))
    with pytest.raises(MultigridError):
        solve(ws, np.ones(K.shape[0]), rel_tol=1.5)


def test_indefinite_coarse_matrix_rejected():
    hier = uniform_hierarchy(build_unit_square(4), 2)
    K = assemble_stiffness(hier.finest)
    with pytest.raises(MultigridError):
        build_workspace(-K, [hier.prolongations[1].matrix])
