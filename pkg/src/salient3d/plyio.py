"""Minimal binary PLY (little-endian) vertex I/O with named scalar channels."""

from pathlib import Path

import numpy as np

from .errors import FormatError, ParseError

_TYPES = {
    "double": "<f8", "float": "<f4", "int": "<i4", "uint": "<u4",
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2",
}
_NAMES = {np.dtype(v).str.lstrip("|"): k for k, v in _TYPES.items()}


def write_ply(path, positions, channels=None, comments=()):
    """Write vertices with x, y, z as doubles plus extra scalar channels."""
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    columns = [positions[:, 0], positions[:, 1], positions[:, 2]]
    for name, values in (channels or {}).items():
        values = np.asarray(values)
        if values.dtype.kind == "b":
            values = values.astype(np.uint8)
        elif values.dtype.kind == "i" and values.dtype.itemsize > 4:
            values = values.astype(np.int32)
        elif values.dtype.kind == "f" and values.dtype.itemsize != 8:
            values = values.astype(np.float32)
        dt = values.dtype.newbyteorder("<").str
        if dt.lstrip("|<") in ("u1", "i1"):
            dt = dt.lstrip("<")
        fields.append((name, dt))
        columns.append(values.reshape(n))
    rec = np.empty(n, dtype=fields)
    for (name, _), col in zip(fields, columns):
        rec[name] = col
    header = ["ply", "format binary_little_endian 1.0"]
    header += [f"comment {c}" for c in comments]
    header.append(f"element vertex {n}")
    for name, dt in fields:
        header.append(f"property {_NAMES[np.dtype(dt).str.lstrip('|')]} {name}")
    header.append("end_header")
    with open(path, "wb") as fid:
        fid.write(("\n".join(header) + "\n").encode("ascii"))
        fid.write(rec.tobytes())


def read_ply(path):
    """Returns (record array, comments)."""
    try:
        data = Path(path).read_bytes()
    except OSError:
        raise ParseError(str(path)) from None
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    comments, fields, n = [], [], None
    for ln in lines[1:]:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "binary_little_endian":
            raise FormatError(f"{path}: only binary_little_endian is supported")
        elif parts[0] == "comment":
            comments.append(ln[len("comment "):])
        elif parts[0] == "element":
            if parts[1] != "vertex" or n is not None:
                raise FormatError(f"{path}: only a single vertex element is supported")
            n = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in _TYPES:
                raise FormatError(f"{path}: unsupported property type {parts[1]}")
            fields.append((parts[2], _TYPES[parts[1]]))
    dtype = np.dtype(fields)
    body = data[end + len(b"end_header\n"):]
    if n is None or len(body) < n * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=dtype, count=n).copy()
    return rec, comments
