"""File formats: ASCII PLY and XYZ clouds, binary feature matrices, CSV/JSON dumps.

Feature files are little-endian: the magic ``D3FM``, a ``u8`` version (1),
``u32`` rows, ``u32`` cols, then rows*cols ``float32`` values row-major.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geom import RigidTransform

FEATURE_MAGIC = b"D3FM"
FEATURE_VERSION = 1
_FEATURE_HEADER = struct.Struct("<4sBII")

_PLY_TYPES = {
    "char", "uchar", "short", "ushort", "int", "uint", "float", "double",
    "int8", "uint8", "int16", "uint16", "int32", "uint32", "float32", "float64",
}


def read_ply(path) -> np.ndarray:
    """Read the x, y, z properties of the vertex element of an ASCII PLY file."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    n_vertex, props, in_vertex, fmt = None, [], False, None
    pre_rows = 0
    end = None
    for ln, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3:
                raise FormatError(f"{path}:{ln}: malformed element line")
            try:
                count = int(tok[2])
            except ValueError:
                raise FormatError(f"{path}:{ln}: element count is not an integer") from None
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = count
            elif n_vertex is None:
                # elements before the vertex block shift where vertex rows start
                pre_rows += count
        elif tok[0] == "property":
            if len(tok) < 3 or (tok[1] != "list" and tok[1] not in _PLY_TYPES):
                raise FormatError(f"{path}:{ln}: malformed property line")
            if in_vertex:
                props.append(tok[-1])
        elif tok[0] == "end_header":
            end = ln
            break
        else:
            raise FormatError(f"{path}:{ln}: unexpected header keyword {tok[0]!r}")
    if end is None:
        raise FormatError(f"{path}: header has no end_header")
    if fmt != "ascii":
        raise FormatError(f"{path}: only ASCII PLY is supported, got format {fmt!r}")
    if n_vertex is None or not all(c in props for c in "xyz"):
        raise FormatError(f"{path}: no vertex element with x, y, z properties")
    cols = [props.index(c) for c in "xyz"]
    start = end + pre_rows
    out = np.empty((n_vertex, 3))
    for r in range(n_vertex):
        ln = start + r + 1
        if ln > len(lines):
            raise FormatError(f"{path}:{ln}: file ends after {r} of {n_vertex} vertices")
        tok = lines[ln - 1].split()
        if len(tok) < len(props):
            raise FormatError(f"{path}:{ln}: expected {len(props)} values, got {len(tok)}")
        try:
            out[r] = [float(tok[c]) for c in cols]
        except ValueError:
            raise FormatError(f"{path}:{ln}: non-numeric vertex value") from None
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{path}: non-finite vertex coordinates")
    return out


def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 3:
            raise FormatError(f"{path}:{ln}: expected 3 coordinates, got {len(tok)}")
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise FormatError(f"{path}:{ln}: non-numeric coordinate") from None
    if not rows:
        raise FormatError(f"{path}: no points")
    out = np.array(rows)
    if not np.all(np.isfinite(out)):
        raise FormatError(f"{path}: non-finite coordinates")
    return out


def write_xyz(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        for p in pts:
            fh.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")


def read_cloud(path) -> np.ndarray:
    """Dispatch on suffix: ``.ply`` or anything else as XYZ."""
    return read_ply(path) if str(path).lower().endswith(".ply") else read_xyz(path)


def write_cloud(path, points) -> None:
    (write_ply if str(path).lower().endswith(".ply") else write_xyz)(path, points)


def write_features(path, features) -> None:
    f = np.ascontiguousarray(features, dtype="<f4")
    if f.ndim != 2:
        raise FormatError("feature matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(_FEATURE_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, f.shape[0], f.shape[1]))
        fh.write(f.tobytes())


def read_features(path) -> np.ndarray:
    """Read a feature file; values come back as float64."""
    data = Path(path).read_bytes()
    if len(data) < _FEATURE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _FEATURE_HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _FEATURE_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f4", offset=_FEATURE_HEADER.size).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{path}: non-finite feature values")
    return arr.astype(np.float64)


MATCH_HEADER = ["src_idx", "tgt_idx", "confidence", "saliency"]


def write_matches_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MATCH_HEADER)
        for i, j, c, s in rows:
            w.writerow([int(i), int(j), repr(float(c)), repr(float(s))])


def read_matches_csv(path):
    """Return ``(src, tgt, confidence, saliency)`` arrays."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r, None)
        if header != MATCH_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(MATCH_HEADER)}")
        rows = []
        for ln, row in enumerate(r, start=2):
            if len(row) != 4:
                raise FormatError(f"{path}:{ln}: expected 4 fields")
            try:
                rows.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
            except ValueError:
                raise FormatError(f"{path}:{ln}: malformed value") from None
    if not rows:
        z = np.zeros(0)
        return z.astype(np.int64), z.astype(np.int64), z, z
    src, tgt, conf, sal = zip(*rows)
    return np.array(src), np.array(tgt), np.array(conf), np.array(sal)


def write_scores_csv(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["idx", "saliency"])
        for i, s in enumerate(np.asarray(scores, dtype=np.float64).tolist()):
            w.writerow([i, repr(s)])


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dump_json(obj))


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from exc


def read_transform(path) -> RigidTransform:
    return RigidTransform.from_dict(read_json(path))
