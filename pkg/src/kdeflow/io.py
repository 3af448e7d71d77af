"""CSV/JSON emission with fixed, round-trip-exact float formatting."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def fmt(v: float) -> str:
    # repr of a Python float is the shortest round-tripping form, stable across platforms
    return repr(float(v))


def point_columns(dim: int) -> list[str]:
    return [f"x_{k + 1}" for k in range(dim)]


def write_points_csv(path, points, weights=None) -> None:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    header = point_columns(pts.shape[1]) + (["weight"] if weights is not None else [])
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for i, row in enumerate(pts):
            vals = [fmt(v) for v in row]
            if weights is not None:
                vals.append(fmt(weights[i]))
            out.writerow(vals)


def read_points_csv(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    data = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), -1)
    if header and header[-1] == "weight":
        return data[:, :-1], data[:, -1]
    return data, None


def write_trace_csv(path, trace) -> None:
    """One row per snapshot: ``t, nu, beta, x_1_1, x_1_2, ...`` (particle-major)."""
    J, d = trace.positions[0].shape
    header = ["t", "nu", "beta"] + [f"x_{j + 1}_{k + 1}" for j in range(J) for k in range(d)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(header)
        for t, nu, beta, pos in zip(trace.times, trace.nu, trace.betas, trace.positions):
            out.writerow([fmt(t), fmt(nu), fmt(beta)] + [fmt(v) for v in np.ravel(pos)])


def write_table_csv(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(columns)
        for r in rows:
            out.writerow([fmt(r[c]) if isinstance(r[c], (float, np.floating)) else r[c]
                          for c in columns])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_observations(path) -> np.ndarray:
    """Observation stream from CSV (header row, one observation per row) or JSON lines."""
    path = Path(path)
    if path.suffix in (".jsonl", ".ndjson", ".json"):
        rows = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        return np.array([r["y"] if isinstance(r, dict) else r for r in rows], dtype=float)
    data, _ = read_points_csv(path)
    return data
