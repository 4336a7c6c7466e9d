"""Point cloud files (PLY, OBJ), pose documents and CSV tables.

Every writer goes through :func:`atomic_write_bytes`, so an interrupted run
leaves either the previous file or the complete new one.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import warnings
from pathlib import Path

import numpy as np

from ._version import __version__
from .errors import FacesIgnored, IoError, ParseError, UnsupportedFormat
from .geometry import PointCloud, RigidTransform

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
FLOAT_TYPES = {"f4", "f8"}


# ------------------------------------------------------------------ atomic

def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# --------------------------------------------------------------------- PLY

class _Property:
    def __init__(self, name, dtype=None, count_type=None):
        self.name = name
        self.dtype = dtype
        self.count_type = count_type  # set for list properties

    @property
    def is_list(self):
        return self.count_type is not None


class _Element:
    def __init__(self, name, count):
        self.name = name
        self.count = count
        self.properties = []

    def names(self):
        return [p.name for p in self.properties]

    def struct_dtype(self):
        if any(p.is_list for p in self.properties):
            return None
        return np.dtype([(p.name, "<" + p.dtype) for p in self.properties])


def _parse_header(data: bytes):
    """Return ``(format, elements, body_offset, header_line_count)``."""
    if not data.startswith(b"ply"):
        raise UnsupportedFormat("file does not start with the 'ply' magic")
    fmt, elements, offset, lineno = None, [], 0, 0
    while True:
        end = data.find(b"\n", offset)
        if end < 0:
            raise ParseError("header has no end_header line", f"byte {offset}")
        lineno += 1
        line = data[offset:end].decode("ascii", errors="replace").strip()
        where = f"line {lineno}"
        offset = end + 1
        words = line.split()
        if not words or words[0] in ("comment", "obj_info", "ply"):
            continue
        key = words[0]
        if key == "end_header":
            break
        if key == "format":
            if len(words) != 3:
                raise ParseError("malformed format line", where)
            fmt = words[1]
            if fmt not in ("ascii", "binary_little_endian"):
                raise UnsupportedFormat(f"PLY format {fmt!r} is not supported")
        elif key == "element":
            if len(words) != 3:
                raise ParseError("malformed element line", where)
            try:
                count = int(words[2])
            except ValueError:
                raise ParseError(f"bad element count {words[2]!r}", where) from None
            if count < 0:
                raise ParseError("negative element count", where)
            elements.append(_Element(words[1], count))
        elif key == "property":
            if not elements:
                raise ParseError("property before any element", where)
            if len(words) == 5 and words[1] == "list":
                if words[2] not in PLY_TYPES or words[3] not in PLY_TYPES:
                    raise ParseError("unknown list property type", where)
                prop = _Property(words[4], PLY_TYPES[words[3]], PLY_TYPES[words[2]])
            elif len(words) == 3:
                if words[1] not in PLY_TYPES:
                    raise ParseError(f"unknown property type {words[1]!r}", where)
                prop = _Property(words[2], PLY_TYPES[words[1]])
            else:
                raise ParseError("malformed property line", where)
            elements[-1].properties.append(prop)
        else:
            raise ParseError(f"unexpected header keyword {key!r}", where)
    if fmt is None:
        raise ParseError("header has no format line", "line 1")
    return fmt, elements, offset, lineno


def _vertex_columns(vertex: _Element):
    names = vertex.names()
    for axis in "xyz":
        if axis not in names:
            raise ParseError(f"vertex element has no {axis!r} property", "header")
    if any(p.is_list for p in vertex.properties):
        raise UnsupportedFormat("list properties on vertices are not supported")
    for p in vertex.properties:
        if p.name in ("x", "y", "z", "nx", "ny", "nz") and p.dtype not in FLOAT_TYPES:
            raise UnsupportedFormat(f"property {p.name!r} must be a 32- or 64-bit float")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))
    return has_normals


def _read_ascii_body(text_lines, first_lineno, elements):
    lineno = first_lineno
    it = iter(text_lines)
    vertex_rows = None
    for el in elements:
        rows = []
        for _ in range(el.count):
            try:
                raw = next(it)
            except StopIteration:
                raise ParseError(f"file ends inside element {el.name!r}", f"line {lineno + 1}") from None
            lineno += 1
            if el.name != "vertex":
                continue
            tokens = raw.split()
            if len(tokens) != len(el.properties):
                raise ParseError(f"expected {len(el.properties)} values, found {len(tokens)}", f"line {lineno}")
            try:
                rows.append([float(tok) for tok in tokens])
            except ValueError:
                raise ParseError("non-numeric vertex value", f"line {lineno}") from None
        if el.name == "vertex":
            vertex_rows = (np.array(rows, dtype=np.float64).reshape(el.count, len(el.properties)), lineno - el.count)
            break
    return vertex_rows


def _read_binary_body(data, offset, elements):
    for el in elements:
        dt = el.struct_dtype()
        if el.name == "vertex":
            need = dt.itemsize * el.count
            if len(data) - offset < need:
                raise ParseError(f"vertex data truncated: need {need} bytes, have {len(data) - offset}",
                                 f"byte {len(data)}")
            return np.frombuffer(data, dtype=dt, count=el.count, offset=offset), offset
        if dt is None:
            raise UnsupportedFormat(f"cannot skip list element {el.name!r} stored before the vertices")
        offset += dt.itemsize * el.count
    return None, offset


def _finish_normals(normals, where_of):
    lengths = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(~(lengths > 0) | ~np.isfinite(lengths))
    if len(bad):
        raise ParseError("zero-length or non-finite normal", where_of(int(bad[0])))
    return normals / lengths[:, None]


def _read_ply(data: bytes) -> PointCloud:
    fmt, elements, offset, header_lines = _parse_header(data)
    vertex = next((e for e in elements if e.name == "vertex"), None)
    if vertex is None:
        raise ParseError("no vertex element", "header")
    has_normals = _vertex_columns(vertex)
    if vertex.count == 0:
        raise ParseError("file contains no vertices", "header")
    names = vertex.names()
    if fmt == "ascii":
        lines = data[offset:].decode("ascii", errors="replace").splitlines()
        table, first = _read_ascii_body(lines, header_lines, elements)
        cols = {name: table[:, i] for i, name in enumerate(names)}
        where_of = lambda i: f"line {first + i + 1}"  # noqa: E731
    else:
        table, start = _read_binary_body(data, offset, elements)
        cols = {name: table[name].astype(np.float64) for name in names}
        stride = vertex.struct_dtype().itemsize
        where_of = lambda i: f"byte {start + i * stride}"  # noqa: E731
    points = np.column_stack([cols["x"], cols["y"], cols["z"]])
    bad = np.flatnonzero(~np.all(np.isfinite(points), axis=1))
    if len(bad):
        raise ParseError("non-finite coordinate", where_of(int(bad[0])))
    normals = None
    if has_normals:
        normals = _finish_normals(np.column_stack([cols["nx"], cols["ny"], cols["nz"]]), where_of)
    return PointCloud(points, normals)


def write_ply(cloud: PointCloud, path, binary: bool = True, dtype: str = "double") -> None:
    """Write ``cloud`` as PLY; binary double payloads round-trip bit-exactly."""
    if dtype not in ("float", "double"):
        raise ValueError("dtype must be 'float' or 'double'")
    fields = ["x", "y", "z"] + (["nx", "ny", "nz"] if cloud.has_normals else [])
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"comment partreg {__version__}", f"element vertex {len(cloud)}"]
    header += [f"property {dtype} {f}" for f in fields]
    header.append("end_header")
    table = cloud.points if not cloud.has_normals else np.hstack([cloud.points, cloud.normals])
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        body = np.ascontiguousarray(table, dtype="<f8" if dtype == "double" else "<f4").tobytes()
    else:
        fmt = "%.17g" if dtype == "double" else "%.9g"
        buf = io.StringIO()
        np.savetxt(buf, table, fmt=fmt)
        body = buf.getvalue().encode("ascii")
    atomic_write_bytes(path, head + body)


# --------------------------------------------------------------------- OBJ

def _read_obj(text: str) -> PointCloud:
    points, faces = [], 0
    for lineno, raw in enumerate(text.splitlines(), start=1):
        words = raw.split()
        if not words or words[0].startswith("#"):
            continue
        if words[0] == "v":
            if len(words) < 4:
                raise ParseError("vertex line needs three coordinates", f"line {lineno}")
            try:
                points.append([float(w) for w in words[1:4]])
            except ValueError:
                raise ParseError("non-numeric vertex coordinate", f"line {lineno}") from None
            if not all(math.isfinite(c) for c in points[-1]):
                raise ParseError("non-finite coordinate", f"line {lineno}")
        elif words[0] == "f":
            faces += 1
    if faces:
        warnings.warn(f"ignoring {faces} face(s); only vertices are read", FacesIgnored, stacklevel=3)
    if not points:
        raise ParseError("file contains no vertices", "line 1")
    return PointCloud(np.array(points))


def write_obj(cloud: PointCloud, path) -> None:
    lines = [f"# partreg {__version__}"]
    lines += ["v %.17g %.17g %.17g" % tuple(p) for p in cloud.points]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ------------------------------------------------------------------ dispatch

def read_point_cloud(path) -> PointCloud:
    """Load a PLY or OBJ file. Missing files raise ``FileNotFoundError``."""
    path = Path(path)
    data = path.read_bytes()
    suffix = path.suffix.lower()
    if suffix == ".ply" or data.startswith(b"ply"):
        return _read_ply(data)
    if suffix == ".obj":
        return _read_obj(data.decode("utf-8", errors="replace"))
    raise UnsupportedFormat(f"unrecognised point cloud format: {path.name}")


def write_point_cloud(cloud: PointCloud, path, binary: bool = True) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(cloud, path, binary=binary)
    elif suffix == ".obj":
        write_obj(cloud, path)
    else:
        raise UnsupportedFormat(f"cannot write point clouds as {suffix or 'extensionless'} files")


# -------------------------------------------------------------------- JSON

def _json(value, indent=0) -> str:
    """JSON with every float written to 17 significant digits."""
    pad = "  " * (indent + 1)
    if isinstance(value, dict):
        if not value:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json(v, indent + 1)}" for k, v in value.items()]
        return "{\n" + ",\n".join(items) + "\n" + "  " * indent + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        seq = list(value)
        if all(isinstance(v, (int, float, np.number)) and not isinstance(v, bool) for v in seq):
            return "[" + ", ".join(_json(v) for v in seq) + "]"
        if not seq:
            return "[]"
        return "[\n" + ",\n".join(pad + _json(v, indent + 1) for v in seq) + "\n" + "  " * indent + "]"
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        return format(v, ".17g") if math.isfinite(v) else "null"
    if value is None:
        return "null"
    return json.dumps(str(value))


def dumps_json(value) -> str:
    return _json(value) + "\n"


def _pose_fields(T: RigidTransform) -> dict:
    return {"rotation": [list(row) for row in T.rotation], "translation": list(T.translation)}


def pose_document(result, config: dict | None = None, extra: dict | None = None) -> dict:
    doc = {"version": __version__}
    doc.update(_pose_fields(result.pose))
    doc.update({
        "final_loss": result.final_loss,
        "chamfer_to_template": result.chamfer_to_template,
        "candidate_index": result.candidate_index,
        "selection": result.selection,
        "candidates": [dict(_pose_fields(c.pose), loss=c.loss, chamfer=c.chamfer, degenerate=c.degenerate)
                       for c in result.all_candidates],
    })
    if extra:
        doc.update(extra)
    if config is not None:
        doc["config"] = config
    return doc


def write_pose(result, path, config: dict | None = None, extra: dict | None = None) -> None:
    """Write a registration result (and the resolved run config) as JSON."""
    atomic_write_text(path, dumps_json(pose_document(result, config, extra)))


def read_pose(path):
    """Return ``(pose, document)`` from a file written by :func:`write_pose`."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid pose document: {exc.msg}", f"line {exc.lineno}") from None
    try:
        T = RigidTransform(np.array(doc["rotation"], dtype=np.float64), np.array(doc["translation"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"pose document lacks a valid pose: {exc}") from None
    return T, doc


# --------------------------------------------------------------------- CSV

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return v


def write_csv(path, fields, rows, header_lines=()) -> None:
    """CSV with ``# ``-prefixed provenance lines before the column header."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_cell(row.get(f, "")) for f in fields])
    atomic_write_text(path, buf.getvalue())


def read_csv(path):
    """Rows of a file written by :func:`write_csv` as dicts of strings."""
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))
