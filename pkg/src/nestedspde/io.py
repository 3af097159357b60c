"""Observation files and output tables.

Tables are comma-delimited text preceded by a ``# key: value`` header block.
Numbers are written with 17 significant digits so files round-trip exactly,
and every write goes to a temporary file that is then renamed into place.
"""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .inference import ObservationSet
from .mesh import lonlat_to_xyz, xyz_to_lonlat

COLUMNS = {"sphere": ("lon_deg", "lat_deg", "value"), "plane": ("x", "y", "value")}


class DataError(ValueError):
    """Unreadable or invalid input data."""


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def header_block(meta: dict) -> str:
    return "".join(f"# {k}: {fmt(v)}\n" for k, v in meta.items())


def parse_header(text: str) -> dict:
    """Leading ``# key: value`` lines of a file as a dict of strings."""
    meta = {}
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        key, sep, value = line[1:].partition(":")
        if sep:
            meta[key.strip()] = value.strip()
    return meta


def format_table(columns, rows, meta: Optional[dict] = None) -> str:
    buf = io.StringIO()
    buf.write(header_block(meta or {}))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_table(path, columns, rows, meta: Optional[dict] = None) -> None:
    atomic_write_text(path, format_table(columns, rows, meta))


@dataclass
class Table:
    meta: dict
    columns: list
    rows: list

    def column(self, name: str, dtype=float) -> np.ndarray:
        try:
            j = self.columns.index(name)
        except ValueError:
            raise DataError(f"column '{name}' not found") from None
        return np.array([dtype(r[j]) for r in self.rows])

    def as_dict(self, key: str, value: str) -> dict:
        i, j = self.columns.index(key), self.columns.index(value)
        return {r[i]: r[j] for r in self.rows}


def read_table(path) -> Table:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    meta = parse_header(text)
    body = [line for line in text.splitlines() if line and not line.startswith("#")]
    if not body:
        raise DataError(f"{path}: no header row")
    reader = csv.reader(body)
    columns = next(reader)
    return Table(meta, columns, [row for row in reader])


def _read_columns(path, names, what="observation"):
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {what} file {path}: {exc.strerror}") from exc
    numbered = [(i + 1, line) for i, line in enumerate(lines) if line.strip() and not line.startswith("#")]
    if not numbered:
        raise DataError(f"{path}: empty {what} file")
    header = [c.strip() for c in next(csv.reader([numbered[0][1]]))]
    missing = [c for c in names if c not in header]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}; expected {', '.join(names)}")
    idx = [header.index(c) for c in names]
    data = []
    for lineno, row in zip((n for n, _ in numbered[1:]), csv.reader([l for _, l in numbered[1:]])):
        try:
            vals = [float(row[j]) for j in idx]
        except (ValueError, IndexError):
            raise DataError(f"{path}, line {lineno}: cannot parse {row!r}") from None
        if not all(np.isfinite(vals)):
            raise DataError(f"{path}, line {lineno}: non-finite value")
        data.append(vals)
    if not data:
        raise DataError(f"{path}: no data rows")
    return np.array(data)


def _locations(arr, manifold, path):
    if manifold == "sphere":
        if np.any(np.abs(arr[:, 0]) > 180) or np.any(np.abs(arr[:, 1]) > 90):
            raise DataError(f"{path}: longitude must lie in [-180, 180] and latitude in [-90, 90]")
        return lonlat_to_xyz(arr[:, 0], arr[:, 1])
    return arr[:, :2]


def read_observations(path, manifold: str = "sphere") -> ObservationSet:
    """Read an observation file.

    The file needs a header row naming ``lon_deg, lat_deg, value`` (sphere)
    or ``x, y, value`` (plane); other columns are ignored and ``#`` lines
    are skipped.

    Raises
    ------
    DataError
        On missing columns, unparsable or non-finite numbers, coordinates
        out of range, or an empty file.
    """
    arr = _read_columns(path, COLUMNS[manifold])
    return ObservationSet(_locations(arr, manifold, path), arr[:, 2])


def read_locations(path, manifold: str = "sphere") -> np.ndarray:
    """Query locations from a file with the two coordinate columns."""
    arr = _read_columns(path, COLUMNS[manifold][:2], "location")
    return _locations(arr, manifold, path)


def location_columns(points, manifold: str):
    """(column names, 2-column array) for writing query locations."""
    points = np.asarray(points, dtype=float)
    if manifold == "sphere":
        lon, lat = xyz_to_lonlat(points)
        return ["lon_deg", "lat_deg"], np.column_stack([lon, lat])
    return ["x", "y"], points[:, :2]


def write_observations(path, locations, values, manifold: str = "sphere", meta: Optional[dict] = None) -> None:
    names, coords = location_columns(locations, manifold)
    rows = np.column_stack([coords, np.asarray(values, dtype=float)])
    write_table(path, [*names, "value"], rows.tolist(), meta)
