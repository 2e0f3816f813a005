"""CSV dump and reload of solved value and control fields.

Layout: ``#``-prefixed ``key=value`` metadata lines (values JSON-encoded),
one header line, then one row per stored slice and node::

    t_index,t,i0,...,i{D-1},value[,value_1...][,clamped]

Floats are written with 17 significant digits, which reproduces doubles
exactly on reload.
"""

from __future__ import annotations

import io
import json

import numpy as np

from .errors import CacheInvalidError, FieldParseError
from .hjb import ControlField, GridSpec, ValueField

__all__ = ["write_field_csv", "read_field_csv", "FORMAT_TAG"]

FORMAT_TAG = "raresim-field-v1"


def _meta_for(field, kind, extra):
    g = field.grid
    meta = {
        "format": FORMAT_TAG,
        "kind": kind,
        "eps": float(field.eps),
        "intervals": [list(iv) for iv in g.intervals],
        "points": list(g.points),
        "n_steps": g.n_steps,
        "n_store": g.n_store,
        "slices": len(field.times),
    }
    if isinstance(field, ControlField):
        meta["cap"] = float(field.cap)
        meta["components"] = field.d
    else:
        meta["scheme"] = field.scheme
    for key, val in (extra or {}).items():
        meta[key] = val
    return meta


def write_field_csv(path, field, kind: str, extra: dict = None) -> None:
    """Write a :class:`ValueField` (``kind`` J or q) or :class:`ControlField` (``kind`` v)."""
    meta = _meta_for(field, kind, extra)
    g = field.grid
    D = g.ndim
    S = len(field.times)
    nodes = np.indices(g.points).reshape(D, -1).T
    M = len(nodes)
    is_control = isinstance(field, ControlField)
    vals = field.values.reshape(S, M, -1)
    c = vals.shape[-1]
    cols = ["t_index", "t"] + [f"i{k}" for k in range(D)]
    cols += ["value"] if c == 1 and not is_control else [f"value_{k}" for k in range(c)]
    if is_control:
        cols.append("clamped")
    with open(path, "w", newline="") as fh:
        for key, val in meta.items():
            fh.write(f"# {key}={json.dumps(val)}\n")
        fh.write(",".join(cols) + "\n")
        for k in range(S):
            block = [np.full((M, 1), k), np.full((M, 1), field.times[k]), nodes, vals[k]]
            fmt = ["%d", "%.17g"] + ["%d"] * D + ["%.17g"] * c
            if is_control:
                block.append(field.clamped[k].reshape(M, 1).astype(int))
                fmt.append("%d")
            buf = io.StringIO()
            np.savetxt(buf, np.hstack(block), fmt=fmt, delimiter=",")
            fh.write(buf.getvalue())


def _locate_bad_line(lines, first, ncols):
    for no, line in enumerate(lines[first:], start=first + 1):
        parts = line.rstrip("\n").split(",")
        if len(parts) != ncols:
            return no, f"expected {ncols} columns, found {len(parts)}"
        try:
            [float(p) for p in parts]
        except ValueError:
            return no, "non-numeric entry"
    return len(lines), "unexpected content"


def read_field_csv(path, expect: dict = None):
    """Reload a field written by :func:`write_field_csv`.

    ``expect`` maps metadata keys (``eps``, ``points``, ``intervals``,
    ``preset``, ``kind`` ...) to required values; any mismatch raises
    :class:`CacheInvalidError`.  Malformed content raises
    :class:`FieldParseError` with a 1-based line number.
    """
    with open(path) as fh:
        lines = fh.readlines()
    meta = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        body = lines[i][1:].strip()
        if "=" not in body:
            raise FieldParseError(f"line {i + 1}: malformed metadata", line=i + 1)
        key, val = body.split("=", 1)
        try:
            meta[key.strip()] = json.loads(val)
        except json.JSONDecodeError as exc:
            raise FieldParseError(f"line {i + 1}: bad metadata value for {key.strip()!r}", line=i + 1) from exc
        i += 1
    if meta.get("format") != FORMAT_TAG:
        raise FieldParseError(f"line 1: not a {FORMAT_TAG} file", line=1)
    for key in ("kind", "eps", "intervals", "points", "n_steps", "n_store", "slices"):
        if key not in meta:
            raise FieldParseError(f"metadata key {key!r} missing", line=i)
    for key, want in (expect or {}).items():
        have = meta.get(key)
        if key == "eps" and have is not None:
            ok = float(have) == float(want)
        elif key == "intervals" and have is not None:
            ok = np.array_equal(np.asarray(have, dtype=float), np.asarray(want, dtype=float))
        elif key == "points" and have is not None:
            ok = list(have) == list(want)
        else:
            ok = have == want
        if not ok:
            raise CacheInvalidError(f"cached field has {key}={have!r}, expected {want!r}")
    if i >= len(lines):
        raise FieldParseError(f"line {i + 1}: missing column header", line=i + 1)
    header = lines[i].strip().split(",")
    ncols = len(header)
    first = i + 1
    points = tuple(meta["points"])
    D = len(points)
    S = int(meta["slices"])
    M = int(np.prod(points))
    try:
        data = np.loadtxt(lines[first:], delimiter=",", ndmin=2) if len(lines) > first else np.empty((0, ncols))
    except ValueError:
        no, why = _locate_bad_line(lines, first, ncols)
        raise FieldParseError(f"line {no}: {why}", line=no) from None
    if data.shape[1] != ncols:
        no, why = _locate_bad_line(lines, first, ncols)
        raise FieldParseError(f"line {no}: {why}", line=no)
    if len(data) != S * M:
        raise FieldParseError(f"line {len(lines) + 1}: file ends after {len(data)} of {S * M} rows (truncated)",
                              line=len(lines) + 1)
    t_index = data[:, 0].astype(int)
    idx = data[:, 2:2 + D].astype(int)
    expected_nodes = np.tile(np.indices(points).reshape(D, -1).T, (S, 1))
    if not (np.array_equal(t_index, np.repeat(np.arange(S), M)) and np.array_equal(idx, expected_nodes)):
        bad = int(np.flatnonzero((t_index != np.repeat(np.arange(S), M)) | np.any(idx != expected_nodes, axis=1))[0])
        raise FieldParseError(f"line {first + bad + 1}: rows out of order", line=first + bad + 1)
    times = data[::M, 1].copy()
    grid = GridSpec(tuple(tuple(iv) for iv in meta["intervals"]), points, int(meta["n_steps"]), int(meta["n_store"]))
    is_control = header[-1] == "clamped"
    if is_control:
        c = int(meta.get("components", ncols - 3 - D))
        values = data[:, 2 + D:2 + D + c].reshape((S,) + points + (c,))
        clamped = data[:, -1].astype(bool).reshape((S,) + points)
        extra = {k: v for k, v in meta.items() if k not in ("format", "cap", "eps", "components")}
        return ControlField(values, times, grid, float(meta["cap"]), clamped, float(meta["eps"]), extra)
    values = data[:, 2 + D].reshape((S,) + points)
    extra = {k: v for k, v in meta.items() if k not in ("format", "eps", "scheme")}
    return ValueField(values, times, grid, float(meta["eps"]), meta.get("scheme", ""), extra)
