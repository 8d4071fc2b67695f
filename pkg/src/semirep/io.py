"""Dataset files and lossless artifact serialization.

Long-format CSV, one row per measurement::

    cluster_id, position_j, visit_k, delta, y, z, x1, ..., xp

``y`` is empty for clusters with ``delta = 0``.  Floats are always written
with 17 significant digits in CSV files and as exact shortest-form numbers in
JSON, so that written artifacts round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Union

import numpy as np

from .core_model import ClusterDataset, ModelParams
from .errors import DatasetParseError
from .smoother import ThetaEstimate

BASE_COLUMNS = ("cluster_id", "position_j", "visit_k", "delta", "y", "z")


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _num(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DatasetParseError(f"row {row}: column {col!r} is not a number ({text!r})") from None
    if not math.isfinite(v):
        raise DatasetParseError(f"row {row}: column {col!r} is not finite ({text!r})")
    return v


def _int(text: str, row: int, col: str) -> int:
    v = _num(text, row, col)
    if v != int(v):
        raise DatasetParseError(f"row {row}: column {col!r} must be an integer ({text!r})")
    return int(v)


def parse_dataset(text: str) -> ClusterDataset:
    """Parse and validate CSV text; rows are reordered by (cluster, j, k)."""
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DatasetParseError("empty dataset file") from None
    if tuple(header[:6]) != BASE_COLUMNS:
        raise DatasetParseError(f"header must start with {', '.join(BASE_COLUMNS)}")
    xcols = header[6:]
    if not xcols or xcols != [f"x{k + 1}" for k in range(len(xcols))]:
        raise DatasetParseError("covariate columns must be named x1..xp in order")
    p = len(xcols)
    recs = []
    for lineno, fields in enumerate(reader, start=2):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != len(header):
            raise DatasetParseError(f"row {lineno}: expected {len(header)} fields, got {len(fields)}")
        cid = fields[0].strip()
        j = _int(fields[1], lineno, "position_j")
        k = _int(fields[2], lineno, "visit_k")
        d = _int(fields[3], lineno, "delta")
        if d not in (0, 1):
            raise DatasetParseError(f"row {lineno}: delta must be 0 or 1")
        ytxt = fields[4].strip()
        if d == 0 and ytxt:
            raise DatasetParseError(f"row {lineno}: response present for missing cluster {cid!r}")
        if d == 1 and not ytxt:
            raise DatasetParseError(f"row {lineno}: response missing for observed cluster {cid!r}")
        y = _num(ytxt, lineno, "y") if d == 1 else math.nan
        z = _num(fields[5], lineno, "z")
        xs = [_num(fields[6 + c], lineno, xcols[c]) for c in range(p)]
        recs.append((cid, j, k, d, y, z, xs, lineno))
    if not recs:
        raise DatasetParseError("dataset has no rows")

    def key(cid):
        try:
            return (0, int(cid), cid)
        except ValueError:
            return (1, 0, cid)

    ids = sorted({r[0] for r in recs}, key=key)
    m = max(r[1] for r in recs)
    R = max(r[2] for r in recs)
    if min(r[1] for r in recs) < 1 or min(r[2] for r in recs) < 1:
        raise DatasetParseError("position_j and visit_k start at 1")
    pos = {cid: i for i, cid in enumerate(ids)}
    n, q = len(ids), m * R
    y = np.full((n, q), np.nan)
    x = np.zeros((n, q, p))
    z = np.full((n, m), np.nan)
    delta = np.full(n, -1, dtype=np.int8)
    seen = np.zeros((n, q), dtype=bool)
    for cid, j, k, d, yv, zv, xs, lineno in recs:
        i = pos[cid]
        col = (j - 1) * R + (k - 1)
        if seen[i, col]:
            raise DatasetParseError(f"row {lineno}: cluster {cid!r} repeats (j={j}, k={k})")
        seen[i, col] = True
        if delta[i] == -1:
            delta[i] = d
        elif delta[i] != d:
            raise DatasetParseError(f"row {lineno}: delta not constant within cluster {cid!r}")
        if np.isnan(z[i, j - 1]):
            z[i, j - 1] = zv
        elif z[i, j - 1] != zv:
            raise DatasetParseError(f"row {lineno}: z not constant within cluster {cid!r}, position {j}")
        y[i, col] = yv
        x[i, col] = xs
    missing = np.where(~seen.all(axis=1))[0]
    if missing.size:
        i = missing[0]
        col = int(np.where(~seen[i])[0][0])
        raise DatasetParseError(
            f"cluster {ids[i]!r} violates the {m}x{R} lattice: (j={col // R + 1}, k={col % R + 1}) absent")
    return ClusterDataset(y, x, z, delta, R, meta={"cluster_ids": ids})


def load_dataset(path: Union[str, Path]) -> ClusterDataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DatasetParseError(f"cannot read {path}: {exc}") from None
    return parse_dataset(text)


def dataset_csv(dataset: ClusterDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(BASE_COLUMNS) + [f"x{k + 1}" for k in range(dataset.p)])
    ids = dataset.meta.get("cluster_ids") if dataset.meta else None
    if ids is None or len(ids) != dataset.n:
        ids = [str(i + 1) for i in range(dataset.n)]
    for i in range(dataset.n):
        d = int(dataset.delta[i])
        for j in range(dataset.m):
            for k in range(dataset.R):
                col = j * dataset.R + k
                yv = fmt(dataset.y[i, col]) if d == 1 else ""
                w.writerow([ids[i], j + 1, k + 1, d, yv, fmt(dataset.z[i, j])]
                           + [fmt(v) for v in dataset.x[i, col]])
    return buf.getvalue()


def write_dataset(dataset: ClusterDataset, path: Union[str, Path]) -> None:
    Path(path).write_text(dataset_csv(dataset))


# -- fit artifacts -----------------------------------------------------------

def _floats(a) -> list:
    return [float(v) for v in np.asarray(a, dtype=float).reshape(-1)]


def theta_to_dict(theta: ThetaEstimate) -> dict:
    """Lossless text form of a curve estimate (every evaluation point)."""
    return {"eval_points": _floats(theta.eval_points), "values": _floats(theta.values),
            "slopes": _floats(theta.slopes), "bandwidth": float(theta.bandwidth)}


def theta_from_dict(d: dict) -> ThetaEstimate:
    arr = lambda k: np.array([float(v) for v in d[k]])
    return ThetaEstimate(arr("eval_points"), arr("values"), arr("slopes"), float(d["bandwidth"]))


def params_to_dict(params: ModelParams) -> dict:
    return {"beta": _floats(params.beta), "sigma2": float(params.sigma2), "rho": float(params.rho)}


def params_from_dict(d: dict) -> ModelParams:
    return ModelParams(np.array([float(v) for v in d["beta"]]), float(d["sigma2"]), float(d["rho"]))


def dumps(obj) -> str:
    """Deterministic JSON; floats use the shortest exactly round-tripping form."""
    return json.dumps(_jsonable(obj), indent=2, sort_keys=False) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj
