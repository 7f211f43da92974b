"""
Helper utility functions for result output: number formatting, CSV tables,
JSON reports and a plain-text run summary.
"""

import csv
import json
import math
import os
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from config import FLOAT_FORMAT


def format_float(value) -> str:
    """Fixed-precision text for a table cell; None and NaN become empty cells."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return FLOAT_FORMAT.format(value)


def observed_order(previous: Optional[float], current: Optional[float], ratio: float = 2.0) -> Optional[float]:
    """log_ratio(previous / current); None when either error is missing or not positive."""
    if previous is None or current is None or previous <= 0.0 or current <= 0.0:
        return None
    return math.log(previous / current) / math.log(ratio)


def to_builtin(value):
    """Recursively convert numpy scalars/arrays to JSON-serializable Python types."""
    if isinstance(value, dict):
        return {str(k): to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_builtin(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return None if math.isnan(value) or math.isinf(value) else value
    return value


def write_table_csv(path: str, columns: Sequence[str], rows: Iterable[Dict]):
    """Write rows with a fixed column order; floats use FLOAT_FORMAT."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_float(row.get(c)) if not isinstance(row.get(c), str) else row[c]
                             for c in columns])


def read_table_csv(path: str) -> List[Dict[str, str]]:
    with open(path, 'r', encoding='utf-8', newline='') as f:
        return list(csv.DictReader(f))


def write_report_json(path: str, report: Dict):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(to_builtin(report), f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write('\n')


def export_to_text(report: Dict) -> str:
    """Plain-text summary of a run report for the console."""
    config = report.get("config", {})
    lines = [
        "=" * 60,
        "GPE GROUND STATE RUN",
        f"domain={config.get('domain')}  zeta={config.get('zeta')}  mode={config.get('mode')}",
        "=" * 60,
    ]

    reference = report.get("reference")
    if reference:
        lines.append(f"reference lambda: {reference.get('lambda'):.12f} ({reference.get('n_dofs')} dofs)")

    for name in ("mlc", "direct", "adaptive"):
        section = report.get(name)
        if not section:
            continue
        lines.extend(["", name.upper(), "-" * 40])
        for rec in section.get("records", []):
            err = rec.get("lambda_error")
            err_text = f"{err:.3e}" if err is not None else "n/a"
            lines.append(f"  N={rec.get('n_dofs'):>7}  lambda={rec.get('lambda'):.10f}  err={err_text}"
                         f"  scf={rec.get('scf_iters')}")

    for failure in report.get("failures") or []:
        lines.append(f"FAILED at {failure.get('stage')}: {failure.get('error')}: {failure.get('message')}")

    lines.extend(["", f"converged: {report.get('converged')}", "=" * 60])
    return '\n'.join(lines)
