"""Embedding-matrix and statistics file formats.

Text embedding files (any extension other than ``.bin``)::

    # optional comment lines
    <rows> <dim>
    v11 v12 ... v1dim
    ...

Values may be separated by whitespace and/or commas. Binary files
(``.bin``) hold two little-endian int64 values (rows, dim) followed by
rows * dim little-endian float64 values in row-major order. Statistics are
JSON objects ``{"mean": [...], "cov": [... row-major ...], "count": n}``.
"""

from __future__ import annotations

import json
import re
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .gauss_stats import GaussStats

_SPLIT = re.compile(r"[,\s]+")


class FormatError(InvalidInput):
    """A data file does not follow its documented layout."""


def _parse_values(text, where):
    parts = [p for p in _SPLIT.split(text.strip()) if p]
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{where}: non-numeric value ({exc})") from exc


def read_embeddings(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".bin":
        return _read_binary(path)
    header = None
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            where = f"{path}: line {lineno}"
            vals = _parse_values(line, where)
            if header is None:
                if len(vals) != 2 or any(v != int(v) or v < 1 for v in vals):
                    raise FormatError(f"{where}: header must be '<rows> <dim>' with positive integers")
                header = (int(vals[0]), int(vals[1]))
                continue
            if len(vals) != header[1]:
                raise FormatError(f"{where}: record {len(rows) + 1} has {len(vals)} values, expected {header[1]}")
            if not all(np.isfinite(vals)):
                raise FormatError(f"{where}: record {len(rows) + 1} has a non-finite value")
            rows.append(vals)
    if header is None:
        raise FormatError(f"{path}: missing '<rows> <dim>' header")
    if len(rows) != header[0]:
        raise FormatError(f"{path}: header declares {header[0]} records, found {len(rows)}")
    return np.asarray(rows, dtype=np.float64).reshape(header)


def _read_binary(path) -> np.ndarray:
    data = path.read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header record")
    rows, dim = struct.unpack("<qq", data[:16])
    if rows < 1 or dim < 1:
        raise FormatError(f"{path}: header declares {rows} x {dim}")
    expected = 16 + 8 * rows * dim
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {rows} x {dim}, found {len(data)}")
    x = np.frombuffer(data, dtype="<f8", offset=16).reshape(rows, dim).astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: record {int(np.argwhere(~np.isfinite(x))[0, 0]) + 1} has a non-finite value")
    return x


def write_embeddings(path, x) -> None:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    path = Path(path)
    if path.suffix == ".bin":
        path.write_bytes(struct.pack("<qq", *x.shape) + x.astype("<f8").tobytes())
        return
    with open(path, "w") as f:
        f.write(f"{x.shape[0]} {x.shape[1]}\n")
        for row in x:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_stats(path) -> GaussStats:
    try:
        with open(path) as f:
            d = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    return GaussStats.from_dict(d)


def write_stats(path, stats: GaussStats) -> None:
    with open(path, "w") as f:
        json.dump(stats.to_dict(), f, indent=1, sort_keys=True)
        f.write("\n")


def dumps_canonical(obj) -> str:
    """Deterministic JSON: sorted keys, shortest round-trip float repr."""
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"
