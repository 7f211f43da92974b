"""
Solver Event Logger for the GPE multilevel-correction solver
Keeps a JSON audit trail of the solver outcomes a run table cannot show:
non-converged iterations, mixing reductions, guard activations, cache use.
Progress messages go through the standard logging module instead.
"""

import json
import logging
from collections import Counter
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

PROGRESS_LOGGER_NAME = "gpe_mlc"
EVENTS_FILENAME = "solver_events.json"

# Event types
SCF_NONCONVERGENCE = "scf_nonconvergence"
MIXING_REDUCTION = "mixing_reduction"
MG_NONCONVERGENCE = "mg_nonconvergence"
EIGENSOLVER_NONCONVERGENCE = "eigensolver_nonconvergence"
COMPOSITE_GUARD = "composite_guard"
BRANCH_CAPTURE = "branch_capture"
REFERENCE_CACHE = "reference_cache"
REFERENCE_ORDER = "reference_order"

MAX_ENTRIES = 1000
MAX_MESSAGE_CHARS = 500


def get_progress_logger(name: Optional[str] = None) -> logging.Logger:
    """Child of the "gpe_mlc" logger; app.py configures the handlers."""
    return logging.getLogger(f"{PROGRESS_LOGGER_NAME}.{name}" if name else PROGRESS_LOGGER_NAME)


class SolverEventLogger:
    """
    Append-only list of solver events in <log_dir>/solver_events.json.

    The newest MAX_ENTRIES events are kept. Entries carry a wall-clock
    timestamp, so the file is never part of a run's deterministic output.
    """

    def __init__(self, log_dir: str = "logs"):
        self.log_dir = Path(log_dir)
        self.log_file = self.log_dir / EVENTS_FILENAME
        self.log_dir.mkdir(parents=True, exist_ok=True)
        if not self.log_file.exists():
            self._store([])

    def _load(self) -> List[Dict]:
        try:
            with open(self.log_file, 'r', encoding='utf-8') as f:
                events = json.load(f)
        except (json.JSONDecodeError, FileNotFoundError):
            return []
        return events if isinstance(events, list) else []

    def _store(self, events: List[Dict]):
        with open(self.log_file, 'w', encoding='utf-8') as f:
            json.dump(events[-MAX_ENTRIES:], f, indent=2, ensure_ascii=False)

    def log_event(
        self,
        event_type: str,
        stage: str,
        message: str,
        level: Optional[int] = None,
        context: Optional[Dict] = None
    ) -> Dict:
        """
        Append one event.

        Args:
            event_type: One of the event type constants above
            stage: Solver stage raising it ("scf", "multigrid", "mlc", "harness")
            message: Human-readable description, truncated to MAX_MESSAGE_CHARS
            level: Hierarchy level the event refers to, if any
            context: Numeric diagnostics (residuals, mixing, Schur complement)

        Returns:
            The stored entry
        """
        entry = {
            "timestamp": datetime.now().isoformat(),
            "event_type": event_type,
            "stage": stage,
            "level": level,
            "message": str(message)[:MAX_MESSAGE_CHARS],
            "context": {k: _plain(v) for k, v in (context or {}).items()},
        }
        events = self._load()
        events.append(entry)
        self._store(events)
        get_progress_logger("events").debug("%s [%s, level %s] %s", event_type, stage, level, message)
        return entry

    def get_audit_trail(self, event_type: Optional[str] = None, limit: int = 100) -> List[Dict]:
        """Most recent events first, optionally filtered by type."""
        events = [e for e in self._load() if event_type is None or e.get("event_type") == event_type]
        return events[::-1][:limit]

    def get_event_stats(self) -> Dict:
        """Event counts by type, by stage and by hierarchy level."""
        events = self._load()
        return {
            "total_events": len(events),
            "event_types": dict(Counter(e.get("event_type", "unknown") for e in events)),
            "stages": dict(Counter(e.get("stage", "unknown") for e in events)),
            "levels": dict(Counter(str(e.get("level")) for e in events if e.get("level") is not None)),
        }


def _plain(value):
    """numpy scalars in a context dict become JSON numbers."""
    return value.item() if isinstance(value, np.generic) else value


_logger_instance: Optional[SolverEventLogger] = None


def get_logger(log_dir: Optional[str] = None) -> SolverEventLogger:
    """
    Process-global event logger.

    A log_dir different from the current one replaces the instance, which is
    how tests route events into a temporary directory.
    """
    global _logger_instance
    if _logger_instance is None or (log_dir is not None and Path(log_dir) != _logger_instance.log_dir):
        if log_dir is None:
            from config import LOGS_DIR
            log_dir = LOGS_DIR
        _logger_instance = SolverEventLogger(log_dir)
    return _logger_instance


def log_scf_event(event_type: str, message: str, **kwargs) -> Dict:
    return get_logger().log_event(event_type, "scf", message, **kwargs)


def log_multigrid_event(message: str, **kwargs) -> Dict:
    return get_logger().log_event(MG_NONCONVERGENCE, "multigrid", message, **kwargs)


def log_correction_event(event_type: str, message: str, **kwargs) -> Dict:
    return get_logger().log_event(event_type, "mlc", message, **kwargs)


def log_harness_event(event_type: str, message: str, **kwargs) -> Dict:
    return get_logger().log_event(event_type, "harness", message, **kwargs)
