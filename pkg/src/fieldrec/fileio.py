"""Readers and writers for XYZ, PLY (ascii + binary_little_endian) and OBJ.

Reading accepts ascii and binary-little-endian PLY; writers emit ascii PLY
and OBJ so outputs stay diffable.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ArgumentError, EmptyInputError, FormatError
from .geometry import OrientedPointCloud, PointCloud, TriangleMesh

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _detect_format(path, fmt=None):
    if fmt is not None:
        fmt = fmt.lower()
        if fmt not in ("xyz", "ply", "obj"):
            raise ArgumentError(f"unknown format '{fmt}'")
        return fmt
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("xyz", "txt"):
        return "xyz"
    if suffix in ("ply", "obj"):
        return suffix
    raise ArgumentError(f"cannot infer format from '{path}'")


# ---------------------------------------------------------------------------
# XYZ
# ---------------------------------------------------------------------------

def _read_xyz(path):
    points = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) < 3:
                raise FormatError("expected at least 3 values", path=path, line=lineno)
            try:
                points.append([float(parts[0]), float(parts[1]), float(parts[2])])
            except ValueError:
                raise FormatError(f"could not parse floats in {parts[:3]!r}",
                                  path=path, line=lineno) from None
    return np.asarray(points, dtype=np.float64).reshape(-1, 3)


def write_xyz(path, points):
    with open(path, "w") as f:
        for p in np.asarray(points, dtype=np.float64):
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

def _read_ply(path):
    """Parse a PLY file; returns (vertex record array, faces ndarray or None)."""
    with open(path, "rb") as f:
        line = f.readline().strip()
        if line != b"ply":
            raise FormatError("missing 'ply' magic", path=path, line=1)
        fmt = None
        elements = []  # (name, count, [(prop_name, dtype) or ('list', ...)])
        lineno = 1
        while True:
            raw = f.readline()
            lineno += 1
            if not raw:
                raise FormatError("unterminated header", path=path, line=lineno)
            tokens = raw.decode("ascii", "replace").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
                if fmt not in ("ascii", "binary_little_endian"):
                    raise FormatError(f"unsupported PLY format '{fmt}'",
                                      path=path, line=lineno)
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if not elements:
                    raise FormatError("property before element", path=path, line=lineno)
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    if tokens[1] not in _PLY_TYPES:
                        raise FormatError(f"unknown property type '{tokens[1]}'",
                                          path=path, line=lineno)
                    elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
            elif tokens[0] == "end_header":
                break
            else:
                raise FormatError(f"unexpected header token '{tokens[0]}'",
                                  path=path, line=lineno)
        if fmt is None:
            raise FormatError("header missing 'format' line", path=path)

        vertex_data = None
        faces = None
        for name, count, props in elements:
            is_list = any(p[0] == "list" for p in props)
            if not is_list:
                dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
                if fmt == "ascii":
                    rows = []
                    for _ in range(count):
                        lineno += 1
                        vals = f.readline().split()
                        if len(vals) < len(props):
                            raise FormatError("short element row", path=path, line=lineno)
                        try:
                            rows.append(tuple(float(v) for v in vals[:len(props)]))
                        except ValueError:
                            raise FormatError("non-numeric element row",
                                              path=path, line=lineno) from None
                    data = np.array(rows, dtype=dtype) if rows else np.empty(0, dtype=dtype)
                else:
                    data = np.frombuffer(f.read(dtype.itemsize * count), dtype=dtype,
                                         count=count)
                if name == "vertex":
                    vertex_data = data
            else:
                # list element (faces); read row by row
                count_type = _PLY_TYPES[props[0][1]]
                index_type = _PLY_TYPES[props[0][2]]
                rows = []
                if fmt == "ascii":
                    for _ in range(count):
                        lineno += 1
                        vals = f.readline().split()
                        if not vals:
                            raise FormatError("short face row", path=path, line=lineno)
                        n = int(vals[0])
                        rows.append([int(v) for v in vals[1:1 + n]])
                else:
                    csize = np.dtype(count_type).itemsize
                    isize = np.dtype(index_type).itemsize
                    cfmt = "<" + {"u1": "B", "i1": "b", "u2": "H", "i2": "h",
                                  "u4": "I", "i4": "i"}[count_type]
                    ifmt = {"u1": "B", "i1": "b", "u2": "H", "i2": "h",
                            "u4": "I", "i4": "i"}[index_type]
                    for _ in range(count):
                        (n,) = struct.unpack(cfmt, f.read(csize))
                        rows.append(list(struct.unpack("<" + ifmt * n, f.read(isize * n))))
                if name == "face":
                    tri = []
                    for row in rows:
                        for j in range(1, len(row) - 1):  # fan-triangulate
                            tri.append([row[0], row[j], row[j + 1]])
                    faces = np.asarray(tri, dtype=np.int64).reshape(-1, 3)
        if vertex_data is None:
            raise FormatError("no vertex element", path=path)
        missing = [c for c in ("x", "y", "z") if c not in vertex_data.dtype.names]
        if missing:
            raise FormatError(f"vertex element lacks coordinates {missing}", path=path)
        return vertex_data, faces


def _ply_vertices(vertex_data):
    return np.stack([vertex_data["x"], vertex_data["y"], vertex_data["z"]],
                    axis=1).astype(np.float64)


def _ply_normals(vertex_data):
    names = vertex_data.dtype.names
    if all(c in names for c in ("nx", "ny", "nz")):
        return np.stack([vertex_data["nx"], vertex_data["ny"], vertex_data["nz"]],
                        axis=1).astype(np.float64)
    return None


def write_ply(path, points, normals=None, faces=None, scalars=None,
              scalar_name="quality"):
    """Write an ascii PLY file with optional normals, faces and a per-vertex scalar."""
    points = np.asarray(points, dtype=np.float64)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\ncomment fieldrec\n")
        f.write(f"element vertex {len(points)}\n")
        f.write("property double x\nproperty double y\nproperty double z\n")
        if normals is not None:
            f.write("property double nx\nproperty double ny\nproperty double nz\n")
        if scalars is not None:
            f.write(f"property double {scalar_name}\n")
        nf = 0 if faces is None else len(faces)
        f.write(f"element face {nf}\n")
        f.write("property list uchar int vertex_indices\n")
        f.write("end_header\n")
        for i, p in enumerate(points):
            row = f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}"
            if normals is not None:
                n = normals[i]
                row += f" {n[0]:.17g} {n[1]:.17g} {n[2]:.17g}"
            if scalars is not None:
                row += f" {scalars[i]:.17g}"
            f.write(row + "\n")
        if faces is not None:
            for face in faces:
                f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def _read_obj(path):
    vertices = []
    faces = []
    with open(path, "r") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError("vertex record needs 3 coordinates",
                                      path=path, line=lineno)
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError:
                    raise FormatError("non-numeric vertex coordinates",
                                      path=path, line=lineno) from None
            elif parts[0] == "f":
                try:
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                except ValueError:
                    raise FormatError("non-numeric face index",
                                      path=path, line=lineno) from None
                idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
                for j in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[j], idx[j + 1]])
    return (np.asarray(vertices, dtype=np.float64).reshape(-1, 3),
            np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh):
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def load_point_cloud(path, fmt=None):
    """Load a point cloud; for PLY/OBJ with faces only the vertices are kept."""
    fmt = _detect_format(path, fmt)
    if fmt == "xyz":
        pts = _read_xyz(path)
    elif fmt == "ply":
        pts = _ply_vertices(_read_ply(path)[0])
    else:
        pts = _read_obj(path)[0]
    if len(pts) == 0:
        raise EmptyInputError(f"{path}: no points")
    return PointCloud(pts)


def load_oriented_point_cloud(path):
    """Load a PLY point cloud that carries nx/ny/nz normals."""
    vertex_data, _ = _read_ply(path)
    pts = _ply_vertices(vertex_data)
    normals = _ply_normals(vertex_data)
    if normals is None:
        raise FormatError("PLY has no normals (nx/ny/nz)", path=path)
    return OrientedPointCloud(pts, normals)


def load_mesh(path, fmt=None):
    fmt = _detect_format(path, fmt)
    if fmt == "ply":
        vertex_data, faces = _read_ply(path)
        vertices = _ply_vertices(vertex_data)
        if faces is None:
            faces = np.zeros((0, 3), dtype=np.int64)
    elif fmt == "obj":
        vertices, faces = _read_obj(path)
    else:
        raise ArgumentError("meshes must be PLY or OBJ")
    return TriangleMesh(vertices, faces)


def save_mesh(path, mesh):
    fmt = _detect_format(path)
    if fmt == "obj":
        write_obj(path, mesh)
    elif fmt == "ply":
        write_ply(path, mesh.vertices, faces=mesh.faces)
    else:
        raise ArgumentError("meshes must be written as PLY or OBJ")


def save_point_cloud(path, cloud, scalars=None):
    fmt = _detect_format(path)
    normals = cloud.normals if isinstance(cloud, OrientedPointCloud) else None
    if fmt == "xyz":
        if normals is not None or scalars is not None:
            raise ArgumentError("XYZ cannot carry normals or scalars; use PLY")
        write_xyz(path, cloud.points)
    elif fmt == "ply":
        write_ply(path, cloud.points, normals=normals, scalars=scalars)
    else:
        raise ArgumentError("point clouds must be written as XYZ or PLY")
