"""Run manifests and deterministic CSV writing."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .. import __version__


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: str | bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    mode = "wb" if isinstance(data, bytes) else "w"
    kwargs = {} if isinstance(data, bytes) else {"encoding": "utf-8", "newline": ""}
    with open(tmp, mode, **kwargs) as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "" if math.isnan(v) else repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def csv_text(columns, rows) -> str:
    """Comma-separated, header row, LF endings; floats in shortest round-trip form."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if isinstance(row, dict):
            row = [row.get(c) for c in columns]
        w.writerow([fmt_cell(v) for v in row])
    return buf.getvalue()


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class Manifest:
    """Collects run metadata; :meth:`write` is atomic and can be called repeatedly."""

    def __init__(self, run_dir, config_hash: str | None = None, command: str = ""):
        self.run_dir = Path(run_dir)
        self.data = {"command": command, "config_hash": config_hash, "version": __version__,
                     "started": now(), "finished": None, "status": "running", "failure": None,
                     "warnings": [], "timings": {}, "files": {}}

    def carry_over(self) -> "Manifest":
        """Keep start time, warnings and timings from a manifest already in ``run_dir``."""
        path = self.run_dir / "manifest.json"
        if path.is_file():
            old = json.loads(path.read_text(encoding="utf-8"))
            for key in ("started", "warnings", "timings"):
                self.data[key] = old.get(key, self.data[key])
        return self

    def warn(self, msg: str):
        self.data["warnings"].append(msg)

    def write(self, status: str, failure: str | None = None) -> Path:
        self.data["status"] = status
        self.data["failure"] = failure
        self.data["finished"] = now()
        files = {}
        for p in sorted(self.run_dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json" and not p.name.endswith(".tmp"):
                files[str(p.relative_to(self.run_dir))] = sha256_file(p)
        self.data["files"] = files
        return atomic_write(self.run_dir / "manifest.json", json.dumps(self.data, indent=2, sort_keys=True) + "\n")
