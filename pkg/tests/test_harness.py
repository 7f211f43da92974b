"""Tests for reference solutions, convergence studies and the adaptive loop."""

import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

from config import REPORT_FILENAME, TABLE_FILENAME
import modules.harness as harness
from modules.harness import (
    ADAPTIVE_COLUMNS, EXIT_NOT_CONVERGED, UNIFORM_COLUMNS, ErrorRecord,
    adaptive_reference_key, build_hierarchy, convergence_table, reference_solve, run,
)
from modules.mlc import LevelWork, WorkReport
from modules.nonlinear_eigen import direct_solve
from modules.run_config import ReferenceMode, RunConfig, RunMode
from utils.errors import ConfigError, MultigridDivergenceError
from utils.helpers import read_table_csv
from utils.logger import get_logger, REFERENCE_CACHE, REFERENCE_ORDER

TWO_PI_SQ = 2.0 * np.pi ** 2


def small_config(tmp_path, **kwargs) -> RunConfig:
    values = dict(base_n=4, levels=2, out_dir=str(tmp_path / "out"))
    values.update(kwargs)
    return RunConfig(**values)


def column(table, name):
    return np.array(table.column(name), dtype=float)


def test_hierarchy_with_extra_coarse_mesh():
    hier = build_hierarchy(RunConfig(base_n=6, levels=3, coarse_level=1))
    assert hier.n_levels == 4
    assert hier.meshes[0].n_triangles == 2 * 3 ** 2
    assert hier.meshes[1].n_triangles == 2 * 6 ** 2


def test_convergence_orders_from_errors():
    records = [ErrorRecord("direct", k, 0, 0.5 ** k, 0.0, 1, lambda_error=4.0 ** -k,
                           h1_error=2.0 ** -k, l2_error=None) for k in range(3)]
    convergence_table(records)
    assert records[0].lambda_order is None
    assert_allclose([r.lambda_order for r in records[1:]], 2.0)
    assert_allclose([r.h1_order for r in records[1:]], 1.0)
    assert records[2].l2_order is None


def test_reference_is_cached(tmp_path, isolated_dirs):
    cfg = small_config(tmp_path)
    first = reference_solve(cfg)
    second = reference_solve(cfg)
    assert first.cache_status == "miss"
    assert second.cache_status == "hit"
    assert second.lam == first.lam
    assert_allclose(second.u.coeffs, first.u.coeffs, rtol=0, atol=0)
    assert os.listdir(isolated_dirs["cache"]) == [f"reference_{cfg.problem_hash()}.npz"]
    assert len(get_logger().get_audit_trail(REFERENCE_CACHE)) == 2


def test_corrupt_cache_entry_is_recomputed(tmp_path, isolated_dirs):
    cfg = small_config(tmp_path)
    first = reference_solve(cfg)
    path = isolated_dirs["cache"] / f"reference_{cfg.problem_hash()}.npz"
    path.write_bytes(b"not an archive")
    again = reference_solve(cfg)
    assert again.cache_status == "mismatch"
    assert again.lam == first.lam


def test_richardson_extrapolation(tmp_path):
    cfg = small_config(tmp_path)
    ref = reference_solve(cfg)
    assert ref.richardson
    assert_allclose(ref.lam, ref.lam_raw + (ref.lam_raw - ref.lam_coarser) / 3.0)
    plain = reference_solve(cfg.with_overrides(reference_richardson=False))
    assert plain.lam == plain.lam_raw
    assert_allclose(plain.lam_raw, ref.lam_raw, rtol=1e-10)


def test_reference_on_linear_problem(tmp_path):
    lam_raw, ref_errors = [], []
    for levels in (1, 2, 3):
        ref = reference_solve(small_config(tmp_path, gamma=(1e-12, 1e-12), zeta=0.0, levels=levels))
        assert ref.lam_raw > TWO_PI_SQ
        assert abs(ref.lam - TWO_PI_SQ) < abs(ref.lam_raw - TWO_PI_SQ)
        lam_raw.append(ref.lam_raw)
        ref_errors.append(abs(ref.lam - TWO_PI_SQ))
        if levels == 1:
            assert ref.lam_second is None and ref.richardson_order is None
        else:
            assert ref.lam_second > ref.lam_coarser > ref.lam_raw
            assert abs(ref.richardson_order - 2.0) <= 0.3
            assert ref.to_dict()["richardson_order"] == ref.richardson_order
    assert lam_raw[0] > lam_raw[1] > lam_raw[2]
    assert ref_errors[0] > ref_errors[1] > ref_errors[2]
    assert get_logger().get_audit_trail(REFERENCE_ORDER) == []


def test_reference_order_far_from_two_is_logged():
    order = harness._check_reference_order(10.0, 9.0, 8.9, level=3)
    assert_allclose(order, np.log2(10.0))
    events = get_logger().get_audit_trail(REFERENCE_ORDER)
    assert len(events) == 1
    assert events[0]["level"] == 3


def test_reference_file_mode(tmp_path):
    cfg = small_config(tmp_path)
    computed = reference_solve(cfg)
    path = tmp_path / "reference.npz"
    np.savez(path, lam_raw=computed.lam_raw, lam_coarser=computed.lam_coarser, coeffs=computed.u.coeffs)
    loaded = reference_solve(cfg.with_overrides(reference_mode=ReferenceMode.FILE, reference_file=str(path)))
    assert loaded.cache_status == "file"
    assert loaded.lam == computed.lam
    assert loaded.lam_second is None


def test_reference_file_without_coefficients(tmp_path):
    path = tmp_path / "reference.npz"
    np.savez(path, lam_raw=20.0)
    cfg = small_config(tmp_path, reference_mode=ReferenceMode.FILE, reference_file=str(path))
    with pytest.raises(ConfigError) as info:
        reference_solve(cfg)
    assert info.value.field == "reference_file"
    assert "coeffs" in str(info.value)


def test_adaptive_reference_key_tracks_correction_knobs():
    cfg = RunConfig(domain="l-shape", mode=RunMode.ADAPTIVE)
    keys = {adaptive_reference_key(cfg)}
    for change in ({"mg_c": 0.05}, {"mlc_scf_factor": 1e-4}, {"mlc_mixing": 0.5},
                   {"dorfler_theta": 0.4}, {"adaptive_iterations": 5}):
        keys.add(adaptive_reference_key(cfg.with_overrides(**change)))
    assert len(keys) == 6


def test_solver_error_still_writes_outputs(tmp_path, monkeypatch):
    def diverging_scheme(hier, spec, cfg=None, on_level=None):
        pair = direct_solve(hier, 0, spec, cfg.scf)
        on_level(0, pair)
        error = MultigridDivergenceError("residual grew over 3 consecutive V-cycles")
        error.report = WorkReport(levels=[LevelWork(level=0, n_dofs=len(pair.u), lam=pair.lam,
                                                    scf_iters=pair.scf_iters)],
                                  composite_dim=hier.meshes[0].n_dofs + 1)
        raise error

    monkeypatch.setattr(harness, "multigrid_scheme", diverging_scheme)
    cfg = small_config(tmp_path, export_meshes=False)
    result = run(cfg)
    assert result.exit_code == EXIT_NOT_CONVERGED
    assert sorted(os.listdir(cfg.out_dir)) == [REPORT_FILENAME, TABLE_FILENAME]

    with open(os.path.join(cfg.out_dir, REPORT_FILENAME), encoding="utf-8") as f:
        report = json.load(f)
    assert not report["converged"]
    assert report["exit_code"] == EXIT_NOT_CONVERGED
    failure, = report["failures"]
    assert failure["stage"] == "mlc"
    assert failure["error"] == "MultigridDivergenceError"
    assert "V-cycles" in failure["message"]
    assert failure["partial_work"]["composite_dim"] == 10
    assert len(failure["partial_work"]["levels"]) == 1
    assert len(report["mlc"]["records"]) == 1
    assert len(report["direct"]["records"]) == 2

    rows = read_table_csv(os.path.join(cfg.out_dir, TABLE_FILENAME))
    assert [row["lambda_mlc"] == "" for row in rows] == [False, True]
    assert all(row["lambda_direct"] != "" for row in rows)


def test_adaptive_correction_failure_stops_loop(tmp_path, monkeypatch):
    def failing_step(*args, **kwargs):
        raise MultigridDivergenceError("residual grew over 3 consecutive V-cycles")

    monkeypatch.setattr(harness, "correction_step", failing_step)
    cfg = small_config(tmp_path, domain="l-shape", mode=RunMode.ADAPTIVE, adaptive_iterations=3,
                       export_meshes=False)
    result = run(cfg, write=False)
    assert result.exit_code == EXIT_NOT_CONVERGED
    assert result.report["adaptive"]["stopped_early"]
    assert [f["stage"] for f in result.report["failures"]] == ["adaptive iteration 1"]
    assert len(result.table.rows) == 1


def test_run_both_writes_outputs(tmp_path):
    cfg = small_config(tmp_path, levels=3)
    result = run(cfg)
    assert result.exit_code == 0
    assert result.table.columns == UNIFORM_COLUMNS
    assert [row["level"] for row in result.table.rows] == [0, 1, 2]

    rows = read_table_csv(os.path.join(cfg.out_dir, TABLE_FILENAME))
    assert list(rows[0].keys()) == UNIFORM_COLUMNS
    assert rows[0]["lambda_order_mlc"] == ""
    with open(os.path.join(cfg.out_dir, REPORT_FILENAME), encoding="utf-8") as f:
        report = json.load(f)
    assert report["schema_version"] == 1
    assert report["config"]["base_n"] == 4
    assert report["mlc"]["work"]["composite_dim"] == 10
    assert len(report["direct"]["records"]) == 3
    assert "timing" in report and "reference_cache" in report["timing"]
    assert sorted(os.listdir(os.path.join(cfg.out_dir, "meshes"))) == [
        "level_00.txt", "level_01.txt", "level_02.txt"]

    mlc, direct = column(result.table, "lambda_mlc"), column(result.table, "lambda_direct")
    assert_allclose(mlc[0], direct[0], rtol=1e-12)
    assert_allclose(mlc, direct, rtol=1e-2)


def test_single_level_mlc_equals_direct(tmp_path):
    mlc = run(small_config(tmp_path, levels=1, mode=RunMode.MLC), write=False)
    direct = run(small_config(tmp_path, levels=1, mode=RunMode.DIRECT), write=False)
    assert mlc.table.rows[0]["lambda_mlc"] == direct.table.rows[0]["lambda_direct"]


def test_identical_configs_give_identical_files(tmp_path):
    cfg = small_config(tmp_path, levels=2)
    run(cfg)
    table_path = os.path.join(cfg.out_dir, TABLE_FILENAME)
    report_path = os.path.join(cfg.out_dir, REPORT_FILENAME)
    with open(table_path, "rb") as f:
        first_table = f.read()
    with open(report_path, encoding="utf-8") as f:
        first_report = json.load(f)
    run(cfg)
    with open(table_path, "rb") as f:
        assert f.read() == first_table
    with open(report_path, encoding="utf-8") as f:
        second_report = json.load(f)
    first_report.pop("timing")
    second_report.pop("timing")
    assert second_report == first_report


@pytest.mark.slow
def test_harmonic_trap_convergence_study(tmp_path):
    """Four levels from n=6: eigenvalue and H1 rates, MLC vs direct, SCF counts."""
    cfg = RunConfig(base_n=6, levels=4, mode=RunMode.BOTH, out_dir=str(tmp_path / "harmonic"))
    result = run(cfg)
    table = result.table
    assert result.exit_code == 0

    for method in ("mlc", "direct"):
        lam_orders = column(table, f"lambda_order_{method}")[1:]
        h1_orders = column(table, f"h1_order_{method}")[1:]
        assert np.all((lam_orders >= 1.7) & (lam_orders <= 2.3)), lam_orders
        assert np.all((h1_orders >= 0.8) & (h1_orders <= 1.2)), h1_orders

    ratios = column(table, "error_ratio")[1:]
    assert np.all((ratios >= 0.5) & (ratios <= 2.0)), ratios

    work = result.report["mlc"]["work"]
    assert all(level["scf_iters"] <= 5 for level in work["levels"][1:])


@pytest.mark.slow
def test_correction_cost_scales_with_dofs(tmp_path):
    """Five levels from n=6: per-level MLC time grows like N and stays below the direct solves."""
    cfg = RunConfig(base_n=6, levels=5, mode=RunMode.BOTH, export_meshes=False,
                    out_dir=str(tmp_path / "timing"))
    result = run(cfg)
    assert result.exit_code == 0

    timing = result.report["timing"]
    level_times = [sum(v for k, v in level.items() if k != "level") for level in timing["mlc"]["levels"]]
    assert len(level_times) == 5
    assert level_times[-1] <= 5.0 * level_times[-2], level_times
    assert timing["mlc"]["total_seconds"] <= timing["direct"]["total_seconds"]


@pytest.mark.slow
def test_adaptive_lshape(tmp_path):
    cfg = RunConfig(domain="l-shape", base_n=4, mode=RunMode.ADAPTIVE, dorfler_theta=0.5,
                    adaptive_iterations=15, out_dir=str(tmp_path / "lshape"))
    result = run(cfg)
    table = result.table
    assert table.columns == ADAPTIVE_COLUMNS
    assert len(table.rows) == 16

    eta = column(table, "estimator")
    assert np.count_nonzero(np.diff(eta) >= 0.0) <= 2

    corner = column(table, "corner_diameter")
    largest = column(table, "max_diameter")
    assert corner[10] < 0.25 * largest[10]

    triangles = column(table, "n_triangles")
    assert np.all(np.diff(triangles) > 0)

    comparison = result.report["adaptive"]["comparison"]
    assert comparison["matched"]
    assert comparison["adaptive_not_worse"]
