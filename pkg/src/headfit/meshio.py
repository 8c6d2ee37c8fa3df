"""Mesh and mask file formats: PLY (read/write), OBJ (read), PGM (write)."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .shape_model import HeadMesh

_PLY_SCALARS = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def write_ply(mesh: HeadMesh, path) -> None:
    """Write a binary little-endian PLY with double-precision vertices."""
    path = Path(path)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {mesh.num_vertices}\n"
        "property double x\n"
        "property double y\n"
        "property double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    verts = np.ascontiguousarray(mesh.vertices, dtype="<f8")
    faces = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("v", "<i4", (3,))])
    faces["n"] = 3
    faces["v"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(verts.tobytes())
        fh.write(faces.tobytes())


def _parse_ply_header(data: bytes, path):
    lines = []
    pos = 0
    while True:
        end = data.find(b"\n", pos)
        if end < 0:
            raise FormatError("header has no end_header", path=path)
        line = data[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if line == "end_header":
            break
        if line and not line.startswith("comment"):
            lines.append(line)
    if not lines or lines[0] != "ply":
        raise FormatError("not a PLY file", path=path)
    fmt = None
    elements = []  # (name, count, [(kind, ...)])
    for line in lines[1:]:
        parts = line.split()
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise FormatError("property before element", path=path)
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}", path=path)
    return fmt, elements, pos


def _triangulate(polys: list[list[int]]) -> np.ndarray:
    tris = []
    for poly in polys:
        if len(poly) < 3:
            continue
        for i in range(1, len(poly) - 1):
            tris.append((poly[0], poly[i], poly[i + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def read_ply(path) -> HeadMesh:
    """Read an ASCII or binary little-endian PLY mesh.

    Extra vertex properties are ignored; polygon faces are fan-triangulated.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read mesh: {exc}", path=str(path)) from exc
    fmt, elements, pos = _parse_ply_header(data, str(path))
    vertices = None
    faces = []
    try:
        if fmt == "ascii":
            tokens = data[pos:].decode("ascii").split("\n")
            row = 0
            for name, count, props in elements:
                rows = []
                for _ in range(count):
                    while row < len(tokens) and not tokens[row].strip():
                        row += 1
                    rows.append(tokens[row].split())
                    row += 1
                if name == "vertex":
                    cols = {p[2]: i for i, p in enumerate(props) if p[0] == "scalar"}
                    idx = [cols["x"], cols["y"], cols["z"]]
                    vertices = np.array(
                        [[float(r[i]) for i in idx] for r in rows], dtype=np.float64
                    )
                elif name == "face":
                    for r in rows:
                        n = int(r[0])
                        faces.append([int(x) for x in r[1:1 + n]])
        else:
            offset = pos
            for name, count, props in elements:
                if all(p[0] == "scalar" for p in props):
                    dtype = np.dtype(
                        [(f"c{i}", "<" + _PLY_SCALARS[p[1]]) for i, p in enumerate(props)]
                    )
                    block = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
                    offset += dtype.itemsize * count
                    if name == "vertex":
                        cols = {p[2]: f"c{i}" for i, p in enumerate(props)}
                        vertices = np.stack(
                            [block[cols[a]].astype(np.float64) for a in "xyz"], axis=1
                        )
                else:
                    # element with a list property: walk rows one by one
                    for _ in range(count):
                        row_vals = []
                        for p in props:
                            if p[0] == "scalar":
                                dt = np.dtype("<" + _PLY_SCALARS[p[1]])
                                row_vals.append(
                                    np.frombuffer(data, dt, 1, offset)[0]
                                )
                                offset += dt.itemsize
                            else:
                                cdt = np.dtype("<" + _PLY_SCALARS[p[1]])
                                vdt = np.dtype("<" + _PLY_SCALARS[p[2]])
                                n = int(np.frombuffer(data, cdt, 1, offset)[0])
                                offset += cdt.itemsize
                                vals = np.frombuffer(data, vdt, n, offset)
                                offset += vdt.itemsize * n
                                row_vals.append(vals)
                        if name == "face":
                            lists = [v for v in row_vals if isinstance(v, np.ndarray)]
                            if lists:
                                faces.append([int(x) for x in lists[0]])
    except (KeyError, ValueError, IndexError, struct.error) as exc:
        raise FormatError(f"malformed PLY body: {exc!r}", path=str(path)) from exc
    if vertices is None:
        raise FormatError("PLY has no vertex element", path=str(path))
    try:
        return HeadMesh(vertices, _triangulate(faces))
    except Exception as exc:
        raise FormatError(f"invalid mesh: {exc}", path=str(path)) from exc


def read_obj(path) -> HeadMesh:
    """Read a Wavefront OBJ mesh (v/f records; polygons fan-triangulated)."""
    path = Path(path)
    vertices = []
    faces = []
    try:
        text = path.read_text()
    except OSError as exc:
        raise FormatError(f"cannot read mesh: {exc}", path=str(path)) from exc
    for ln, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    if i < 0:
                        i = len(vertices) + 1 + i
                    idx.append(i - 1)
                faces.append(idx)
        except (ValueError, IndexError) as exc:
            raise FormatError(f"line {ln}: {exc}", path=str(path)) from exc
    if not vertices:
        raise FormatError("OBJ has no vertices", path=str(path))
    try:
        return HeadMesh(np.array(vertices, dtype=np.float64), _triangulate(faces))
    except Exception as exc:
        raise FormatError(f"invalid mesh: {exc}", path=str(path)) from exc


def load_mesh(path) -> HeadMesh:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix == ".obj":
        return read_obj(path)
    raise FormatError(f"unsupported mesh format {suffix!r}", path=str(path))


def write_pgm(mask: np.ndarray, path) -> None:
    """Dump a boolean mask as a binary PGM (set pixels white)."""
    mask = np.asarray(mask)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())
