"""On-disk formats: tensor dumps, PGM masks, feature files, checkpoints, CSV.

The tensor dump is one header line `shape: d0 d1 ...` followed by the values
in row-major order, formatted so float64 round-trips exactly. Every other
format in the package builds on it.
"""

from __future__ import annotations

import json
import os

import numpy as np

from .tensor import Tensor


class FormatError(ValueError):
    """A file does not match its declared format."""


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def format_tensor(x) -> str:
    arr = _as_array(x)
    lines = ["shape: " + " ".join(str(int(d)) for d in arr.shape)]
    flat = arr.reshape(-1)
    if arr.ndim == 2:
        per_line = arr.shape[1]
    else:
        per_line = 8
    for i in range(0, flat.size, per_line):
        lines.append(" ".join(repr(float(v))  # shortest exact round-trip repr
                              for v in flat[i:i + per_line]))
    return "\n".join(lines) + "\n"


def dump_tensor(x, path) -> None:
    with open(path, "w") as fh:
        fh.write(format_tensor(x))


def _parse_tensor(token_iter, header_line: str) -> np.ndarray:
    if not header_line.startswith("shape:"):
        raise FormatError(f"expected 'shape:' header, got {header_line!r}")
    shape = tuple(int(t) for t in header_line.split()[1:])
    count = int(np.prod(shape)) if shape else 1
    values = []
    while len(values) < count:
        try:
            values.append(float(next(token_iter)))
        except StopIteration:
            raise FormatError(f"tensor data truncated: wanted {count} values, "
                              f"got {len(values)}") from None
    return np.array(values).reshape(shape)


def parse_tensor(text: str) -> np.ndarray:
    lines = text.strip().split("\n")
    tokens = iter(" ".join(lines[1:]).split())
    return _parse_tensor(tokens, lines[0].strip())


def load_tensor(path) -> np.ndarray:
    with open(path) as fh:
        return parse_tensor(fh.read())


# ---------------------------------------------------------------------------
# PGM (P2) masks and heatmaps

def write_pgm(path, grid: np.ndarray, max_val: int = 255) -> None:
    """ASCII PGM; binary {0,1} grids are scaled to 0/255."""
    g = np.asarray(grid)
    if g.ndim != 2:
        raise FormatError(f"PGM needs a 2-D grid, got shape {g.shape}")
    if g.max() <= 1:
        g = g * 255
    g = np.clip(np.round(g), 0, max_val).astype(int)
    h, w = g.shape
    with open(path, "w") as fh:
        fh.write(f"P2\n{w} {h}\n{max_val}\n")
        for row in g:
            fh.write(" ".join(str(v) for v in row) + "\n")


def read_pgm(path) -> np.ndarray:
    with open(path) as fh:
        tokens = fh.read().split()
    if tokens[0] != "P2":
        raise FormatError(f"not an ASCII PGM: magic {tokens[0]!r}")
    w, h, _max = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array([int(t) for t in tokens[4:4 + w * h]])
    if vals.size != w * h:
        raise FormatError("PGM data truncated")
    return vals.reshape(h, w)


# ---------------------------------------------------------------------------
# face feature files

def save_face_feature(path, feature) -> None:
    with open(path, "w") as fh:
        fh.write(f"identity: {feature.identity}\n")
        fh.write("global:\n")
        fh.write(format_tensor(feature.global_vec))
        fh.write("local:\n")
        fh.write(format_tensor(feature.local_grid))


def load_face_feature(path):
    from . import tensor as tc
    from .embedding import FaceFeature

    with open(path) as fh:
        lines = [ln.strip() for ln in fh.read().strip().split("\n")]
    if not lines or not lines[0].startswith("identity:"):
        raise FormatError(f"{path}: missing 'identity:' line")
    identity = lines[0].split(":", 1)[1].strip()
    try:
        g_at = lines.index("global:")
        l_at = lines.index("local:")
    except ValueError:
        raise FormatError(f"{path}: missing global:/local: sections") from None
    g = parse_tensor("\n".join(lines[g_at + 1:l_at]))
    l = parse_tensor("\n".join(lines[l_at + 1:]))
    return FaceFeature(tc.constant(g), tc.constant(l), identity)


# ---------------------------------------------------------------------------
# checkpoints: index header, then named tensor dumps in index order

def save_checkpoint(path, named: dict) -> None:
    names = sorted(named)
    with open(path, "w") as fh:
        fh.write(f"index: {len(names)}\n")
        for name in names:
            if any(c.isspace() for c in name):
                raise FormatError(f"tensor name {name!r} contains whitespace")
            fh.write(name + "\n")
        for name in names:
            fh.write(name + "\n")
            fh.write(format_tensor(named[name]))


def load_checkpoint(path) -> dict:
    with open(path) as fh:
        lines = fh.read().strip().split("\n")
    if not lines[0].startswith("index:"):
        raise FormatError(f"{path}: missing checkpoint index header")
    count = int(lines[0].split()[1])
    names = [ln.strip() for ln in lines[1:1 + count]]
    out = {}
    pos = 1 + count
    for expected in names:
        if lines[pos].strip() != expected:
            raise FormatError(f"{path}: expected tensor {expected!r} at line "
                              f"{pos + 1}, found {lines[pos]!r}")
        header = lines[pos + 1].strip()
        shape = tuple(int(t) for t in header.split()[1:])
        n_vals = int(np.prod(shape)) if shape else 1
        per_line = shape[1] if len(shape) == 2 else 8
        n_lines = max(1, -(-n_vals // per_line))
        body = lines[pos + 1:pos + 2 + n_lines]
        out[expected] = parse_tensor("\n".join(body))
        pos += 2 + n_lines
    return out


# ---------------------------------------------------------------------------
# CSV traces and reports

def write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_csv(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


# ---------------------------------------------------------------------------
# annotation files

def load_annotation(path, image_size: int | None = None) -> list[dict]:
    """Parse an annotation JSON into record dicts with validated face entries."""
    with open(path) as fh:
        doc = json.load(fh)
    records = doc["records"] if isinstance(doc, dict) else doc
    for rec in records:
        for face in rec.get("faces", []):
            box = face["box"]
            if len(box) != 4 or not (box[0] < box[2] and box[1] < box[3]):
                raise FormatError(f"bad box {box}")
            if image_size is not None:
                if box[0] < 0 or box[1] < 0 or box[2] > image_size or box[3] > image_size:
                    raise FormatError(f"box {box} outside image of size {image_size}")
            for kp in face.get("keypoints", []):
                if len(kp) != 3 or not 0.0 <= kp[2] <= 1.0:
                    raise FormatError(f"bad keypoint {kp}: confidence must be in [0, 1]")
    return records


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
