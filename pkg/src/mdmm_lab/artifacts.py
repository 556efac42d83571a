"""File output helpers: atomic writes, CSV with schema headers, the MANIFEST."""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

RECORD_SCHEMA = "mdmm-lab/run-record/1"
TRACE_SCHEMA = "mdmm-lab/trace/1"
SOLVE_TRACE_SCHEMA = "mdmm-lab/solve-trace/1"
SWEEP_SCHEMA = "mdmm-lab/sweep-summary/1"
SUMMARY_SCHEMA = "mdmm-lab/pipeline-summary/1"
REPORT_SCHEMA = "mdmm-lab/framework-report/1"
MANIFEST_SCHEMA = "mdmm-lab/manifest/1"


def atomic_write(path, data) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode() if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def fmt(value) -> str:
    """Locale-independent cell formatting; floats round-trip exactly."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def csv_text(schema: str, columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    buf.write(",".join(columns) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) for v in row) + "\n")
    return buf.getvalue()


def read_csv(path):
    """Return ``(schema, columns, rows)`` with cells as strings."""
    schema = None
    columns = None
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            if line.startswith("# schema:"):
                schema = line.split(":", 1)[1].strip()
            continue
        cells = line.split(",")
        if columns is None:
            columns = cells
        elif line:
            rows.append(cells)
    return schema, columns, rows


def json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, entries) -> Path:
    """``entries`` are ``(relative_path, status)``; hashes are taken from disk."""
    out_dir = Path(out_dir)
    lines = [f"# schema: {MANIFEST_SCHEMA}", "# path\tstatus\tsha256"]
    for rel, status in entries:
        target = out_dir / rel
        digest = sha256_file(target) if target.exists() else "-"
        lines.append(f"{rel}\t{status}\t{digest}")
    return atomic_write(out_dir / "MANIFEST", "\n".join(lines) + "\n")
