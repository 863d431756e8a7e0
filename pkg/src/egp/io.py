"""Dataset and report files.

Datasets are CSV files whose first line is ``#`` followed by a JSON header
naming the manifold, its parameters and the column layout. Each further row
holds the flat raw representation of one point, then optional ``y`` and
``f`` columns. Every write goes to a temporary file that is renamed into
place.
"""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile

import numpy as np

from .manifolds import ManifoldKind, ManifoldPoint, kind_from_dict
from .simgen import Dataset

__all__ = [
    "atomic_write",
    "write_json",
    "read_json",
    "dataset_to_csv",
    "dataset_from_csv",
    "write_dataset",
    "read_dataset",
]


def atomic_write(path: str | os.PathLike, text: str) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    atomic_write(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def _fmt(v: float) -> str:
    # repr round-trips doubles exactly
    return repr(float(v))


def _raw_columns(kind: ManifoldKind) -> list[str]:
    return [f"x{i}" for i in range(kind.raw_size)]


def dataset_to_csv(ds: Dataset) -> str:
    kind = ds.kind
    columns = _raw_columns(kind)
    has_y = ds.y is not None and np.size(ds.y) > 0
    if has_y:
        columns.append("y")
    if ds.f is not None:
        columns.append("f")
    header = dict(kind.to_dict())
    header["columns"] = columns
    header["task"] = "classification" if ds.is_classification else "regression"
    # the task is a top-level header field; keep meta free of it so re-writing is stable
    header["meta"] = {k: v for k, v in ds.meta.items() if k != "task"}
    buf = io.StringIO()
    buf.write("# " + json.dumps(header, sort_keys=True, default=_json_default) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for i, p in enumerate(ds.points):
        row = [_fmt(v) for v in kind.to_flat(p.coords)]
        if has_y:
            row.append(_fmt(ds.y[i]))
        if ds.f is not None:
            row.append(_fmt(ds.f[i]))
        writer.writerow(row)
    return buf.getvalue()


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def dataset_from_csv(text: str, validate_points: bool = True) -> Dataset:
    """Parse the dataset format; raises ValueError on malformed input."""
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError("dataset file must start with a '#' JSON header")
    try:
        header = json.loads(lines[0][1:])
    except json.JSONDecodeError as exc:
        raise ValueError(f"bad dataset header: {exc}") from None
    if "manifold" not in header:
        raise ValueError("dataset header lacks 'manifold'")
    kind = kind_from_dict(header)
    rows = list(csv.reader(lines[1:]))
    if not rows:
        raise ValueError("dataset has no column row")
    columns = rows[0]
    raw = _raw_columns(kind)
    if columns[: len(raw)] != raw or not set(columns[len(raw):]) <= {"y", "f"}:
        raise ValueError(f"columns {columns} do not match {header['manifold']} layout")
    data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    data = data.reshape(-1, len(columns))
    points = []
    for r in data[:, : len(raw)]:
        coords = kind.from_flat(r)
        p = ManifoldPoint.checked(kind, coords) if validate_points else ManifoldPoint(kind, coords)
        points.append(p)
    y = data[:, columns.index("y")] if "y" in columns else np.zeros(0)
    f = data[:, columns.index("f")] if "f" in columns else None
    meta = dict(header.get("meta") or {})
    task = header.get("task")
    if task is not None:
        meta["task"] = task
    return Dataset(kind, points, y, f, meta)


def write_dataset(path, ds: Dataset) -> None:
    atomic_write(path, dataset_to_csv(ds))


def read_dataset(path, validate_points: bool = True) -> Dataset:
    with open(path) as fh:
        text = fh.read()
    return dataset_from_csv(text, validate_points)
