"""Row-major result tables, atomic CSV/JSON writes and log-log slope fits."""
from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np


class ResultTable:
    """Rectangular table with unique column names; rows are dicts."""

    def __init__(self, columns, rows=None):
        columns = list(columns)
        if len(set(columns)) != len(columns):
            raise ValueError(f"duplicate column names in {columns}")
        self.columns = columns
        self.rows: list[dict] = []
        for r in rows or []:
            self.append(r)

    def append(self, row: dict):
        if set(row) != set(self.columns):
            raise ValueError(f"row keys {sorted(row)} do not match columns {sorted(self.columns)}")
        self.rows.append({c: row[c] for c in self.columns})

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        if name not in self.columns:
            raise KeyError(name)
        return [r[name] for r in self.rows]

    def where(self, **match) -> "ResultTable":
        return ResultTable(self.columns, [r for r in self.rows if all(r[k] == v for k, v in match.items())])

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for r in self.rows:
            lines.append(",".join(_fmt(r[c]) for c in self.columns))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ResultTable":
        lines = [l for l in text.splitlines() if l]
        cols = lines[0].split(",")
        rows = []
        for l in lines[1:]:
            vals = l.split(",")
            if len(vals) != len(cols):
                raise ValueError("ragged CSV row")
            rows.append({c: _parse(v) for c, v in zip(cols, vals)})
        return cls(cols, rows)

    def write_csv(self, path):
        atomic_write(path, self.to_csv())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    s = str(v)
    if "," in s or "\n" in s:
        raise ValueError(f"value {s!r} needs quoting; not allowed in this CSV dialect")
    return s


def _parse(s: str):
    if s in ("true", "false"):
        return s == "true"
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def atomic_write(path, text: str | bytes):
    """Write via a temp file in the same directory and rename over the final path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(text, bytes) else "w"
    fd, tmp = tempfile.mkstemp(prefix="." + path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj):
    atomic_write(path, json.dumps(obj, indent=1, sort_keys=True) + "\n")


def loglog_slope(table: ResultTable | dict, x: str, y: str) -> float:
    """Least-squares slope of log y against log x."""
    xs = np.asarray(table.column(x) if isinstance(table, ResultTable) else table[x], dtype=np.float64)
    ys = np.asarray(table.column(y) if isinstance(table, ResultTable) else table[y], dtype=np.float64)
    if xs.size < 3:
        raise ValueError("need at least 3 rows for a slope fit")
    if np.any(xs <= 0) or np.any(ys <= 0) or not (np.all(np.isfinite(xs)) and np.all(np.isfinite(ys))):
        raise ValueError("log-log fit needs positive finite entries")
    lx, ly = np.log(xs), np.log(ys)
    return float(np.polyfit(lx, ly, 1)[0])


def max_min_ratio(values) -> float:
    v = [float(a) for a in values]
    if min(v) <= 0:
        return math.inf
    return max(v) / min(v)
