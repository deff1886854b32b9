"""Versioned JSON reports and their side-by-side comparison.

Reports hold only deterministic content (no timestamps, no host info), so the
same command with the same seed and config yields byte-identical files.
Non-finite numbers are written as the strings ``"Infinity"``,
``"-Infinity"`` and ``"NaN"``.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
from pathlib import Path
from typing import Mapping, Sequence

from . import __version__
from .io import dumps_json

__all__ = ["SCHEMA_VERSION", "make_report", "write_report", "read_report", "flatten", "compare_reports", "to_csv"]

SCHEMA_VERSION = 1


def make_report(command: str, name: str, seed: int, config: Mapping, **sections) -> dict:
    """Assemble a report dict with the standard header fields."""
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": "fptlab",
        "tool_version": __version__,
        "command": command,
        "name": name,
        "seed": seed,
        "config": dict(config),
    }
    report.update(sections)
    return report


def write_report(report: Mapping, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(report))
    return path


def _check_schema(report: Mapping, where: str = "report") -> None:
    if report.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{where}: unsupported schema_version {report.get('schema_version')!r} (expected {SCHEMA_VERSION})")
    for key in ("command", "name"):
        if key not in report:
            raise ValueError(f"{where}: missing field {key!r}")


def read_report(path) -> dict:
    report = json.loads(Path(path).read_text())
    _check_schema(report, str(path))
    return report


def flatten(obj, prefix: str = "") -> dict[str, object]:
    """Scalar leaves keyed by dotted path; lists of numbers (traces) are skipped."""
    out: dict[str, object] = {}
    if isinstance(obj, Mapping):
        for k in sorted(obj):
            out.update(flatten(obj[k], f"{prefix}{k}."))
    elif isinstance(obj, list):
        if obj and all(isinstance(v, Mapping) for v in obj):
            for i, v in enumerate(obj):
                key = v.get("location", i) if isinstance(v, Mapping) else i
                out.update(flatten(v, f"{prefix}{key}."))
    else:
        out[prefix[:-1]] = obj
    return out


def compare_reports(reports: Sequence[Mapping]) -> dict:
    """Merge reports into a table: one column per report, ordered by name.

    A single report is returned unchanged.
    """
    if not reports:
        raise ValueError("compare needs at least one report")
    for i, r in enumerate(reports):
        _check_schema(r, f"report {i}")
    if len({r["command"] for r in reports}) != 1:
        raise ValueError("cannot compare reports from different commands")
    if len(reports) == 1:
        return reports[0]
    names = [r["name"] for r in reports]
    if len(set(names)) != len(names):
        raise ValueError(f"report names must be unique to form columns, got {names}")
    ordered = sorted(reports, key=lambda r: r["name"])
    flat = [flatten(r) for r in ordered]
    fields = sorted(set().union(*flat))
    return {
        "schema_version": SCHEMA_VERSION,
        "command": "compare",
        "name": "compare",
        "columns": [r["name"] for r in ordered],
        "rows": {f: [fl.get(f) for fl in flat] for f in fields},
    }


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isinf(v):
            return "Infinity" if v > 0 else "-Infinity"
        if math.isnan(v):
            return "NaN"
        return "%.17g" % v
    return str(v)


def to_csv(table: Mapping) -> str:
    """CSV projection of a comparison table (or of a single report)."""
    if "columns" not in table:
        table = {"columns": [table["name"]], "rows": {k: [v] for k, v in flatten(table).items()}}
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["field", *table["columns"]])
    for field in sorted(table["rows"]):
        w.writerow([field, *(_cell(v) for v in table["rows"][field])])
    return buf.getvalue()
