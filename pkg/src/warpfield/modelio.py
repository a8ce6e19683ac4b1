"""Versioned JSON model files and CSV tables.

Floats are written with the shortest repr that round-trips, so a model
read back from disk reproduces predictions bit for bit and rewriting it
gives the same bytes.
"""

import csv
import io
import json
import math
import os
import tempfile
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .fit import FittedModel
from .gplik import CovModel
from .splinebasis import AnchorSet, WarpBasis, build_E
from .warp import FoldConfig, Warp, WarpSpec

__all__ = [
    "FORMAT",
    "VERSION",
    "ModelFileError",
    "model_to_dict",
    "model_from_dict",
    "save_model",
    "load_model",
    "atomic_write",
    "read_sites",
    "read_matrix",
    "read_cov",
    "write_csv",
    "fmt",
]

FORMAT = "warpfield-model"
VERSION = 1


class ModelFileError(ValueError):
    pass


def _plain(obj):
    """Convert numpy containers and scalars to JSON-ready Python objects."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        if math.isnan(v) or math.isinf(v):
            return str(v)
        return v
    return obj


def _array(x, ndim=None):
    a = np.asarray(x, dtype=float)
    if ndim is not None and a.ndim != ndim:
        if a.size == 0:
            return a.reshape((0,) * ndim)
        raise ModelFileError(f"expected {ndim}-d array, got shape {a.shape}")
    return a


def model_to_dict(model: FittedModel, extra: Optional[dict] = None) -> dict:
    spec = model.spec
    fold = None
    if spec.fold is not None:
        f = spec.fold
        fold = {"delta_weight": f.delta_weight, "scale": f.scale, "nx": f.nx, "ny": f.ny,
                "epsilon": f.epsilon}
    bases = [{"k": b.k, "U_k": b.U_k, "Lambda_k": b.Lambda_k, "Z_k": b.Z_k}
             for b in model.warp.bases]
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "spec": {"kind": spec.kind, "ranks": list(spec.ranks), "bijective": spec.bijective,
                 "fold": fold},
        "cov_model": {"correlation": model.cov.correlation, "cosine": model.cov.cosine},
        "anchors": model.anchors,
        "bases": bases,
        "beta": model.beta,
        "lambda": model.lam,
        "H": model.H,
        "cov_params": model.cov.report(model.theta),
        "reml": model.reml_value,
        "loglik": model.loglik_value,
        "lp": model.lp_value,
        "n": float(model.n),
        "converged": model.converged,
        "standardization": model.standardization,
        "diagnostics": model.diagnostics,
        "warnings": list(model.warnings),
        "extra": extra or {},
    }
    return _plain(doc)


def model_from_dict(doc: dict) -> FittedModel:
    if doc.get("format") != FORMAT:
        raise ModelFileError("not a warpfield model file")
    if doc.get("version") != VERSION:
        raise ModelFileError(f"unsupported model file version {doc.get('version')!r} "
                             f"(expected {VERSION})")
    try:
        s = doc["spec"]
        fold = FoldConfig(**s["fold"]) if s.get("fold") else None
        spec = WarpSpec(s["kind"], tuple(s["ranks"]), bool(s["bijective"]), fold)
        anchors = AnchorSet(_array(doc["anchors"], 2))
        E = build_E(anchors)
        E.setflags(write=False)
        bases = []
        for b in doc["bases"]:
            Z = None if b["Z_k"] is None else _array(b["Z_k"], 2)
            U, lam = _array(b["U_k"], 2), _array(b["Lambda_k"], 1)
            for a in (U, lam) + ((Z,) if Z is not None else ()):
                a.setflags(write=False)
            bases.append(WarpBasis(anchors, E, U, lam, Z, int(b["k"])))
        warp = Warp(spec, anchors, bases)
        cov = CovModel(**doc["cov_model"])
        reml = doc["reml"]
        model = FittedModel(
            spec, warp, cov, _array(doc["beta"], 1), _array(doc["lambda"], 1),
            _array(doc["H"], 2), None if reml is None else float(reml),
            float(doc["loglik"]), float(doc["lp"]), float(doc["n"]), bool(doc["converged"]),
            diagnostics=dict(doc["diagnostics"]), warnings=list(doc["warnings"]),
            standardization=doc["standardization"])
    except (KeyError, TypeError) as err:
        raise ModelFileError(f"malformed model file: {err!r}") from err
    if model.beta.size != warp.n_coef + cov.n_params:
        raise ModelFileError("coefficient vector length does not match the model")
    return model


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def atomic_write(path, text: str):
    """Write ``text`` to a temporary file beside ``path`` and rename it into place."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(model: FittedModel, path, extra: Optional[dict] = None):
    atomic_write(path, dumps(model_to_dict(model, extra)))


def load_model(path) -> Tuple[FittedModel, dict]:
    try:
        with open(path) as f:
            doc = json.load(f)
    except json.JSONDecodeError as err:
        raise ModelFileError(f"{path}: invalid JSON ({err})") from err
    return model_from_dict(doc), doc.get("extra", {})


# ---------------------------------------------------------------------------
# tables


def fmt(v) -> str:
    return "%.17g" % v


def write_csv(path, rows: Sequence[Sequence], header: Optional[Sequence[str]] = None,
              comments: Sequence[str] = ()):
    """Write numbers at full precision; ``path`` of ``None`` or ``-`` returns the text."""
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    if header is not None:
        w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    text = buf.getvalue()
    if path is None or path == "-":
        return text
    atomic_write(path, text)
    return text


def _parse_float(cell: str, where: str) -> float:
    cell = cell.strip()
    if cell == "" or cell.upper() in ("NA", "NAN"):
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise ModelFileError(f"{where}: cannot parse {cell!r} as a number") from None


def _rows(path) -> Tuple[List[str], List[List[str]]]:
    with open(path, newline="") as f:
        lines = [ln for ln in f.read().splitlines()]
    comments = [ln[1:].strip() for ln in lines if ln.startswith("#")]
    body = [r for r in csv.reader(ln for ln in lines if ln.strip() and not ln.startswith("#"))]
    return comments, body


def _is_header(row) -> bool:
    for c in row:
        try:
            float(c)
        except ValueError:
            if c.strip() not in ("", "NA", "NaN", "nan"):
                return True
    return False


def read_matrix(path, allow_missing: bool = True) -> Tuple[Optional[List[str]], np.ndarray, List[str]]:
    """Numeric CSV with an optional header row; returns ``(header, array, comments)``."""
    comments, body = _rows(path)
    if not body:
        raise ModelFileError(f"{path}: no data rows")
    header = None
    if _is_header(body[0]):
        header, body = [c.strip() for c in body[0]], body[1:]
    if not body:
        raise ModelFileError(f"{path}: no data rows")
    width = len(header) if header is not None else len(body[0])
    out = np.empty((len(body), width))
    for i, row in enumerate(body):
        lineno = i + 1 + (header is not None)
        if len(row) != width:
            raise ModelFileError(f"{path}: row {lineno} has {len(row)} columns, expected {width}")
        for j, cell in enumerate(row):
            out[i, j] = _parse_float(cell, f"{path}: row {lineno}, column {j + 1}")
    if not allow_missing and np.isnan(out).any():
        i, j = np.argwhere(np.isnan(out))[0]
        raise ModelFileError(f"{path}: missing value at row {i + 1}, column {j + 1}")
    if np.isinf(out).any() and not allow_missing:
        raise ModelFileError(f"{path}: infinite values are not allowed")
    return header, out, comments


def read_sites(path) -> np.ndarray:
    header, X, _ = read_matrix(path, allow_missing=False)
    if X.shape[1] != 2:
        raise ModelFileError(f"{path}: sites need 2 columns (lon,lat), found {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ModelFileError(f"{path}: site coordinates must be finite")
    return X


def read_cov(path, n: Optional[float] = None) -> Tuple[np.ndarray, float]:
    """Covariance CSV with a ``# n=<int>`` line (overridden by ``n``)."""
    _, V, comments = read_matrix(path, allow_missing=False)
    if V.shape[0] != V.shape[1]:
        raise ModelFileError(f"{path}: covariance must be square, got {V.shape}")
    if n is None:
        for c in comments:
            key, _, val = c.partition("=")
            if key.strip() == "n":
                n = float(val)
    if n is None:
        raise ModelFileError(f"{path}: no '# n=<int>' line; pass --n")
    return V, float(n)
