"""PLY point-cloud i/o: ascii and binary_little_endian.

Reads the vertex element with properties x, y, z (float32 or float64) plus
the optional uchar ``label``, uchar ``camera_id``, and float
``camera_distance`` columns. Unknown scalar properties are skipped. On
write, the sentinel 255 encodes "no label" / "no camera" in the uchar
columns and NaN encodes an unknown camera distance.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .cloud import NO_CAMERA, NO_LABEL, PointCloud

_SCALAR_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_UCHAR_NONE = 255


class PlyParseError(ValueError):
    """Malformed PLY input; message carries the file and byte offset."""

    def __init__(self, path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte {offset}: {reason}")


def _read_header(f, path):
    """Parse the header; returns (format, elements, data_start_offset)."""
    fmt = None
    elements = []  # (name, count, [(prop_name, dtype_code or None for lists)])
    line = f.readline()
    if line.strip() != b"ply":
        raise PlyParseError(path, 0, "missing 'ply' magic")
    while True:
        offset = f.tell()
        line = f.readline()
        if not line:
            raise PlyParseError(path, offset, "unexpected end of header")
        parts = line.decode("ascii", errors="replace").split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyParseError(path, offset, f"unsupported format {parts[1:]}")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise PlyParseError(path, offset, "malformed element line")
            try:
                count = int(parts[2])
            except ValueError:
                raise PlyParseError(path, offset, f"bad element count {parts[2]!r}") from None
            elements.append((parts[1], count, []))
        elif parts[0] == "property":
            if not elements:
                raise PlyParseError(path, offset, "property before any element")
            if parts[1] == "list":
                elements[-1][2].append((parts[-1], None))
            else:
                if len(parts) != 3:
                    raise PlyParseError(path, offset, "malformed property line")
                code = _SCALAR_TYPES.get(parts[1])
                if code is None:
                    raise PlyParseError(path, offset, f"unknown property type {parts[1]!r}")
                elements[-1][2].append((parts[2], code))
        elif parts[0] == "end_header":
            break
        else:
            raise PlyParseError(path, offset, f"unknown header keyword {parts[0]!r}")
    if fmt is None:
        raise PlyParseError(path, f.tell(), "header missing format line")
    return fmt, elements, f.tell()


def read_ply(path) -> PointCloud:
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements, data_start = _read_header(f, path)
        vertex = next((e for e in elements if e[0] == "vertex"), None)
        if vertex is None:
            raise PlyParseError(path, data_start, "no vertex element")
        if elements[0][0] != "vertex":
            raise PlyParseError(path, data_start, "vertex must be the first element")
        _, count, props = vertex
        names = [p[0] for p in props]
        for req in ("x", "y", "z"):
            if req not in names:
                raise PlyParseError(path, data_start, f"vertex element missing property {req!r}")
        if any(code is None for _, code in props):
            raise PlyParseError(path, data_start, "list properties on vertex are unsupported")

        if fmt == "binary_little_endian":
            dtype = np.dtype([(name, "<" + code) for name, code in props])
            raw = f.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise PlyParseError(path, data_start + len(raw), "truncated vertex data")
            rows = np.frombuffer(raw, dtype=dtype, count=count)
        else:
            dtype = np.dtype([(name, code) for name, code in props])
            rows = np.zeros(count, dtype=dtype)
            for i in range(count):
                offset = f.tell()
                line = f.readline()
                if not line:
                    raise PlyParseError(path, offset, f"truncated ascii data at vertex {i}")
                fields = line.split()
                if len(fields) != len(props):
                    raise PlyParseError(
                        path, offset, f"vertex {i}: expected {len(props)} values, got {len(fields)}"
                    )
                try:
                    for (name, _), val in zip(props, fields):
                        rows[name][i] = float(val)
                except ValueError:
                    raise PlyParseError(path, offset, f"vertex {i}: non-numeric value") from None

    positions = np.column_stack([rows["x"], rows["y"], rows["z"]]).astype(np.float64)
    labels = camera_ids = camera_distances = None
    if "label" in names:
        lab = rows["label"].astype(np.int16)
        labels = np.where(lab == _UCHAR_NONE, NO_LABEL, lab)
    if "camera_id" in names:
        cam = rows["camera_id"].astype(np.int32)
        camera_ids = np.where(cam == _UCHAR_NONE, NO_CAMERA, cam)
    if "camera_distance" in names:
        camera_distances = rows["camera_distance"].astype(np.float64)
    return PointCloud(positions, labels, camera_ids, camera_distances)


def write_ply(cloud: PointCloud, path, binary: bool = True) -> None:
    path = Path(path)
    props = [("x", "f8"), ("y", "f8"), ("z", "f8")]
    has_labels = bool(np.any(cloud.labels != NO_LABEL))
    has_cams = bool(np.any(cloud.camera_ids != NO_CAMERA))
    has_dist = bool(np.any(~np.isnan(cloud.camera_distances)))
    if has_labels:
        props.append(("label", "u1"))
    if has_cams:
        props.append(("camera_id", "u1"))
    if has_dist:
        props.append(("camera_distance", "f4"))

    dtype = np.dtype([(name, "<" + code) for name, code in props])
    rows = np.zeros(len(cloud), dtype=dtype)
    rows["x"], rows["y"], rows["z"] = cloud.positions.T
    if has_labels:
        rows["label"] = np.where(cloud.labels == NO_LABEL, _UCHAR_NONE, cloud.labels)
    if has_cams:
        rows["camera_id"] = np.where(cloud.camera_ids == NO_CAMERA, _UCHAR_NONE, cloud.camera_ids)
    if has_dist:
        rows["camera_distance"] = cloud.camera_distances.astype(np.float32)

    type_names = {"f8": "double", "f4": "float", "u1": "uchar"}
    header = io.StringIO()
    header.write("ply\n")
    header.write(f"format {'binary_little_endian' if binary else 'ascii'} 1.0\n")
    header.write(f"element vertex {len(cloud)}\n")
    for name, code in props:
        header.write(f"property {type_names[code]} {name}\n")
    header.write("end_header\n")

    with open(path, "wb") as f:
        f.write(header.getvalue().encode("ascii"))
        if binary:
            f.write(rows.tobytes())
        else:
            for row in rows:
                fields = []
                for name, code in props:
                    v = row[name]
                    fields.append(str(int(v)) if code == "u1" else repr(float(v)))
                f.write((" ".join(fields) + "\n").encode("ascii"))
