"""Point cloud and residual file formats: ASCII PLY and plain CSV."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .geometry import PointCloud


class FormatError(ValueError):
    """A file could not be parsed."""


_PLY_TYPES = {"char", "uchar", "short", "ushort", "int", "uint", "float", "double",
              "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64"}


def _unit_normals(normals: np.ndarray) -> np.ndarray:
    length = np.linalg.norm(normals, axis=1)
    if np.any(length <= 0):
        raise FormatError("zero-length normal")
    return normals / length[:, None]


def _cloud(values: np.ndarray, what: str) -> PointCloud:
    if values.shape[0] == 0:
        raise FormatError(f"{what}: no points")
    if not np.all(np.isfinite(values)):
        raise FormatError(f"{what}: non-finite coordinate")
    normals = _unit_normals(values[:, 3:6]) if values.shape[1] == 6 else None
    return PointCloud(values[:, :3], normals)


def parse_ply(text: str, what: str = "PLY") -> PointCloud:
    """Vertices (x, y, z and optional nx, ny, nz) of an ASCII PLY document.

    Other vertex properties are ignored; elements after the vertices are skipped.
    """
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{what}: missing 'ply' magic line")
    elements: list[tuple[str, int, list[str]]] = []
    fmt = None
    body = None
    for i, raw in enumerate(lines[1:], start=1):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else ""
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"{what}: bad element line {raw!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise FormatError(f"{what}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append("list:" + tok[-1])
            elif len(tok) == 3 and tok[1] in _PLY_TYPES:
                elements[-1][2].append(tok[2])
            else:
                raise FormatError(f"{what}: bad property line {raw!r}")
        elif tok[0] == "end_header":
            body = i + 1
            break
        else:
            raise FormatError(f"{what}: unexpected header line {raw!r}")
    if body is None:
        raise FormatError(f"{what}: header not terminated")
    if fmt != "ascii":
        raise FormatError(f"{what}: only ASCII PLY is supported (format {fmt})")
    rows = [ln for ln in lines[body:] if ln.strip()]
    pos = 0
    for name, count, props in elements:
        if name != "vertex":
            pos += count
            continue
        if any(p.startswith("list:") for p in props):
            raise FormatError(f"{what}: list properties on vertices are not supported")
        try:
            cols = [props.index(c) for c in ("x", "y", "z")]
        except ValueError:
            raise FormatError(f"{what}: vertex element lacks x, y, z") from None
        if all(c in props for c in ("nx", "ny", "nz")):
            cols += [props.index(c) for c in ("nx", "ny", "nz")]
        chunk = rows[pos:pos + count]
        if len(chunk) != count:
            raise FormatError(f"{what}: expected {count} vertices, found {len(chunk)}")
        try:
            table = np.array([[float(v) for v in r.split()] for r in chunk], dtype=np.float64)
        except ValueError as exc:
            raise FormatError(f"{what}: {exc}") from None
        if table.ndim != 2 or table.shape[1] != len(props):
            raise FormatError(f"{what}: vertex rows must have {len(props)} values")
        return _cloud(table[:, cols], what)
    raise FormatError(f"{what}: no vertex element")


def format_ply(cloud: PointCloud) -> str:
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\n")
    buf.write(f"element vertex {len(cloud)}\n")
    names = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.normals is not None else [])
    for n in names:
        buf.write(f"property double {n}\n")
    buf.write("end_header\n")
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    for row in data:
        buf.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    return buf.getvalue()


def read_table(text: str, what: str = "CSV") -> np.ndarray:
    """Numeric rows of a comma-separated file; a non-numeric first row is a header."""
    rows = [r for r in csv.reader(io.StringIO(text)) if r and any(c.strip() for c in r)]
    if rows:
        try:
            [float(c) for c in rows[0]]
        except ValueError:
            rows = rows[1:]
    if not rows:
        raise FormatError(f"{what}: no data rows")
    width = len(rows[0])
    try:
        table = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{what}: {exc}") from None
    if table.ndim != 2 or any(len(r) != width for r in rows):
        raise FormatError(f"{what}: rows have differing lengths")
    if not np.all(np.isfinite(table)):
        raise FormatError(f"{what}: non-finite value")
    return table


def parse_points_csv(text: str, what: str = "CSV") -> PointCloud:
    table = read_table(text, what)
    if table.shape[1] not in (3, 6):
        raise FormatError(f"{what}: expected x,y,z[,nx,ny,nz] rows, got {table.shape[1]} columns")
    return _cloud(table, what)


def read_cloud(path: str | Path) -> PointCloud:
    """Load a point cloud; ``.ply`` files are parsed as PLY, anything else as CSV."""
    p = Path(path)
    try:
        text = p.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{p}: {exc}") from None
    if p.suffix.lower() == ".ply":
        return parse_ply(text, str(p))
    return parse_points_csv(text, str(p))


def write_cloud(path: str | Path, cloud: PointCloud) -> None:
    p = Path(path)
    if p.suffix.lower() == ".ply":
        p.write_text(format_ply(cloud))
        return
    data = cloud.points if cloud.normals is None else np.hstack([cloud.points, cloud.normals])
    p.write_text("".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in data))


def read_residuals(path: str | Path) -> np.ndarray:
    """Residual table (one row per correspondence, m columns)."""
    p = Path(path)
    try:
        text = p.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"{p}: {exc}") from None
    return read_table(text, str(p))
