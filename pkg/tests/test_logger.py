"""Solver event audit trail."""

import json

import numpy as np

from utils.logger import (
    MAX_ENTRIES, SCF_NONCONVERGENCE, MG_NONCONVERGENCE,
    get_logger, log_multigrid_event, log_scf_event,
)


def test_events_are_persisted_newest_first(isolated_dirs):
    log_scf_event(SCF_NONCONVERGENCE, "first", level=1, context={"mixing": np.float64(0.3)})
    log_multigrid_event("second", level=2)
    trail = get_logger().get_audit_trail()
    assert [e["message"] for e in trail] == ["second", "first"]
    assert get_logger().get_audit_trail(SCF_NONCONVERGENCE, limit=5)[0]["context"] == {"mixing": 0.3}

    with open(isolated_dirs["logs"] / "solver_events.json", encoding="utf-8") as f:
        assert len(json.load(f)) == 2


def test_event_stats():
    for level in (1, 1, 3):
        log_multigrid_event("cap", level=level)
    log_scf_event(SCF_NONCONVERGENCE, "budget")
    stats = get_logger().get_event_stats()
    assert stats["total_events"] == 4
    assert stats["event_types"] == {MG_NONCONVERGENCE: 3, SCF_NONCONVERGENCE: 1}
    assert stats["stages"] == {"multigrid": 3, "scf": 1}
    assert stats["levels"] == {"1": 2, "3": 1}


def test_trail_is_capped():
    events = get_logger()
    for i in range(MAX_ENTRIES + 5):
        events.log_event(MG_NONCONVERGENCE, "multigrid", f"event {i}")
    trail = events.get_audit_trail(limit=MAX_ENTRIES + 10)
    assert len(trail) == MAX_ENTRIES
    assert trail[0]["message"] == f"event {MAX_ENTRIES + 4}"


def test_corrupt_file_reads_as_empty(isolated_dirs):
    (isolated_dirs["logs"] / "solver_events.json").write_text("{not json", encoding="utf-8")
    assert get_logger().get_audit_trail() == []
    log_multigrid_event("after corruption")
    assert len(get_logger().get_audit_trail()) == 1
