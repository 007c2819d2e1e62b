"""Result persistence: JSON and CSV files carrying the config hash."""
from __future__ import annotations

import csv
import dataclasses
import enum
import json
import math
from pathlib import Path

import numpy as np

HASH_KEY = "config_hash"


class HashMismatch(Exception):
    """Two result files come from different configurations."""


def to_jsonable(obj):
    """Convert dataclasses, numpy values and non-finite floats to plain JSON types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return to_jsonable(obj.to_dict())
        return to_jsonable(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        # JSON has no inf/nan; keep them as strings
        return v if math.isfinite(v) else repr(v)
    return obj


def fmt(v) -> str:
    """Number formatting for CSV: integers as is, floats with 17 significant digits."""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return format(v, ".17g") if math.isfinite(v) else repr(v)
    return str(v)


def write_json(path, payload: dict, config_hash: str) -> Path:
    path = Path(path)
    data = {HASH_KEY: config_hash, **to_jsonable(payload)}
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, header, rows, config_hash: str) -> Path:
    """CSV with a leading ``# config_hash=...`` comment line."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {HASH_KEY}={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def read_hash(path) -> str:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())[HASH_KEY]
    with open(path) as fh:
        first = fh.readline().strip()
    prefix = f"# {HASH_KEY}="
    if not first.startswith(prefix):
        raise ValueError(f"{path} carries no config hash")
    return first[len(prefix):]


def _numbers(path):
    path = Path(path)
    if path.suffix == ".json":
        out = []

        def walk(x):
            if isinstance(x, bool):
                return
            if isinstance(x, (int, float)):
                out.append(float(x))
            elif isinstance(x, dict):
                for k in sorted(x):
                    walk(x[k])
            elif isinstance(x, list):
                for v in x:
                    walk(v)

        data = json.loads(path.read_text())
        data.pop(HASH_KEY, None)
        walk(data)
        return np.array(out)
    vals = []
    with open(path) as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    for row in rows[1:]:
        for cell in row:
            try:
                vals.append(float(cell))
            except ValueError:
                pass
    return np.array(vals)


def compare_files(a, b) -> float:
    """Largest absolute difference between the numbers of two result files.

    Refuses (``HashMismatch``) when the embedded config hashes differ.
    Returns ``inf`` when the files hold different numbers of values.
    """
    ha, hb = read_hash(a), read_hash(b)
    if ha != hb:
        raise HashMismatch(f"config hash mismatch: {ha[:12]} vs {hb[:12]}")
    va, vb = _numbers(a), _numbers(b)
    if va.shape != vb.shape:
        return math.inf
    if va.size == 0:
        return 0.0
    both_nan = np.isnan(va) & np.isnan(vb)
    d = np.where(both_nan, 0.0, np.abs(va - vb))
    return float(np.nanmax(np.where(np.isnan(d), np.inf, d)))
