"""GF3D field files, observation/segment CSVs and JSON helpers."""
import csv
import json

import numpy as np

from .errors import DataError
from .grid import GridSpec

MAGIC = "GF3D"


def write_gf3d(path, grid, slices):
    """slices: (T+1, n_cells) in linear-index order."""
    Z = np.asarray(slices, dtype="<f8").reshape(-1, grid.n_cells)
    header = {"magic": MAGIC, "M": grid.M, "N": grid.N, "P": grid.P,
              "bounds": [float(b) for b in grid.bounds], "T": int(Z.shape[0] - 1)}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(Z).tobytes())


def read_gf3d(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        try:
            header = json.loads(line.decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise DataError(f"{path}: not a GF3D file (bad header)") from None
        if header.get("magic") != MAGIC:
            raise DataError(f"{path}: not a GF3D file (magic {header.get('magic')!r})")
        grid = GridSpec(header["M"], header["N"], header["P"], tuple(header["bounds"]))
        n = (header["T"] + 1) * grid.n_cells
        raw = fh.read()
    if len(raw) != 8 * n:
        raise DataError(f"{path}: expected {n} values, found {len(raw) // 8}")
    Z = np.frombuffer(raw, dtype="<f8").reshape(header["T"] + 1, grid.n_cells).copy()
    if not np.all(np.isfinite(Z)):
        raise DataError(f"{path}: non-finite values")
    return grid, Z


def _read_rows(path, required, optional=()):
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        try:
            head = [h.strip() for h in next(rd)]
        except StopIteration:
            raise DataError(f"{path}: empty file", row=1) from None
        missing = [c for c in required if c not in head]
        unknown = [c for c in head if c not in required and c not in optional]
        if missing or unknown:
            raise DataError(f"{path}: header must be {','.join(required)}"
                            f"{''.join(',[' + o + ']' for o in optional)}; got {','.join(head)}", row=1)
        cols = {c: head.index(c) for c in head}
        out = {c: [] for c in head}
        for lineno, row in enumerate(rd, start=2):
            if not row or all(not x.strip() for x in row):
                continue
            if len(row) != len(head):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, expected {len(head)}", row=lineno)
            for c, i in cols.items():
                try:
                    v = float(row[i])
                except ValueError:
                    raise DataError(f"{path}: row {lineno}: cannot parse {c}={row[i]!r}", row=lineno) from None
                if not np.isfinite(v):
                    raise DataError(f"{path}: row {lineno}: non-finite {c}", row=lineno)
                out[c].append(v)
    return {c: np.array(v) for c, v in out.items()}


def read_observations(path):
    """Columns x,y,z,value[,realization] -> (points, values, realization or None)."""
    d = _read_rows(path, ("x", "y", "z", "value"), ("realization",))
    pts = np.column_stack([d["x"], d["y"], d["z"]])
    real = d.get("realization")
    if real is not None:
        if np.any(real != np.round(real)):
            raise DataError(f"{path}: realization ids must be integers")
        real = real.astype(np.int64)
    return pts, d["value"], real


def write_observations(path, points, values, realization=None):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "value"] + (["realization"] if realization is not None else []))
        for i, (p, v) in enumerate(zip(points, values)):
            row = [repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(v))]
            if realization is not None:
                row.append(int(realization[i]))
            w.writerow(row)


def read_segments(path):
    d = _read_rows(path, ("segment", "x", "y", "z", "value"))
    return d["segment"].astype(np.int64), np.column_stack([d["x"], d["y"], d["z"]]), d["value"]


def write_segments(path, seg, points, values):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["segment", "x", "y", "z", "value"])
        for s, p, v in zip(seg, points, values):
            w.writerow([int(s), repr(float(p[0])), repr(float(p[1])), repr(float(p[2])), repr(float(v))])


def dump_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_table(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
