"""Command-line interface.

Subcommands: ``fit``, ``predict``, ``simulate``, ``variogram``,
``warpgrid`` and ``cencov``. Exit status is 0 on success, 1 on input or
runtime errors and 2 when a fit did not converge or a bijective fit still folds.
"""

import argparse
import logging
import math
import os
import sys
import warnings
from contextlib import nullcontext
from typing import List, Optional

import numpy as np

from . import __version__
from .censored import CensoredMatrix, CensoringError, fitcenmvn
from .fit import FitError, fit
from .gplik import NotPositiveDefinite, SampleCov
from .modelio import (ModelFileError, atomic_write, load_model, read_cov, read_matrix, read_sites,
                      save_model, write_csv)
from .postfit import CovarianceError, predict_dspace, predict_vcov, simulate_gp, variogram_data
from .splinebasis import BasisError
from .warp import FoldConfig, WarpError, WarpSpec

log = logging.getLogger("warpfield")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_WARN = 2


class UsageError(Exception):
    pass


def _thread_limit():
    """Cap BLAS threads from ``WARPFIELD_THREADS`` (0 or unset means no cap)."""
    val = os.environ.get("WARPFIELD_THREADS", "0").strip() or "0"
    try:
        n = int(val)
    except ValueError:
        raise UsageError(f"WARPFIELD_THREADS must be an integer, got {val!r}") from None
    if n <= 0:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _out(text: str, path: Optional[str]):
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        atomic_write(path, text)


def _parse_ranks(text: Optional[str], kind: str) -> tuple:
    if kind == "aniso":
        if text:
            raise UsageError("--k does not apply to aniso models")
        return ()
    if not text:
        return (10, 10) if kind == "deform" else (10,)
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--k must be a comma-separated list of integers, got {text!r}") from None


def _parse_range(text: str, name: str) -> np.ndarray:
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"{name} must be start:stop:step")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError(f"{name} must be numeric start:stop:step") from None
    if not step > 0 or stop < start:
        raise UsageError(f"{name} gives an empty grid")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _read_obs(path):
    header, Y, _ = read_matrix(path, allow_missing=True)
    return header, Y


def _sample_from_args(args, m: int):
    """Sample covariance from --obs or --cov/--n."""
    if bool(args.obs) == bool(args.cov):
        raise UsageError("give exactly one of --obs or --cov")
    if args.cov:
        V, n = read_cov(args.cov, args.n)
        if V.shape[0] != m:
            raise UsageError(f"{args.cov}: covariance has {V.shape[0]} sites, sites file has {m}")
        return SampleCov(V, n), {"source": "cov", "center": None}
    _, Y = _read_obs(args.obs)
    if Y.shape[1] != m:
        raise UsageError(f"{args.obs}: {Y.shape[1]} columns, sites file has {m} sites")
    complete = ~np.isnan(Y).any(axis=1)
    if complete.sum() < Y.shape[0]:
        log.warning("dropping %d rows with missing values", Y.shape[0] - complete.sum())
    Y = Y[complete]
    if Y.shape[0] < 2:
        raise UsageError(f"{args.obs}: need at least 2 complete rows")
    if np.isinf(Y).any():
        raise UsageError(f"{args.obs}: observations must be finite")
    center = getattr(args, "center", True)
    return SampleCov.from_observations(Y, center=center), {"source": "obs", "center": center}


def _report(model) -> List[str]:
    lines = [f"model: {model.spec.kind}"]
    if model.reml_value is not None:
        lines.append(f"reml: {model.reml_value:.10g}")
    lines.append(f"loglik: {model.loglik_value:.10g}")
    if model.spec.kind == "aniso":
        a = model.alpha_hat()
        lines.append(f"alpha: {a[0]:.6g} {a[1]:.6g}")
    else:
        lines.append("lambda: " + " ".join(f"{v:.6g}" for v in model.lam))
    for k, v in model.cov.report(model.theta).items():
        lines.append(f"{k}: {v:.6g}")
    if model.spec.bijective:
        d = model.diagnostics
        state = "true" if d.get("bijective") else "false"
        lines.append(f"bijective: {state} ({d.get('negative_triangles')} negative triangles "
                     f"of {d.get('n_triangles')})")
    lines.append(f"converged: {'yes' if model.converged else 'no'}")
    for w in model.warnings:
        lines.append(f"warning: {w}")
    return lines


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    coords = read_sites(args.sites)
    m = coords.shape[0]
    sample, source = _sample_from_args(args, m)
    ranks = _parse_ranks(args.k, args.model)
    if ranks and max(ranks) > m:
        log.warning("rank(s) %s exceed %d sites; using %d", ranks, m, m)
        ranks = tuple(min(k, m) for k in ranks)
    fold = None
    if args.bijective:
        fold = FoldConfig(args.mult, args.scl, args.nx, args.ny)
    spec = WarpSpec(args.model, ranks, args.bijective, fold)
    model = fit(coords, sample, spec, correlation=args.correlation, cosine=args.cosine,
                standardize=args.standardize)
    extra = {"source": source, "seed": args.seed}
    save_model(model, args.out, extra)
    sys.stdout.write("\n".join(_report(model)) + "\n")
    folded = spec.bijective and not model.diagnostics.get("bijective", False)
    return EXIT_WARN if not model.converged or folded else EXIT_OK


def cmd_predict(args) -> int:
    model, _ = load_model(args.model_file)
    newdata = read_sites(args.newdata) if args.newdata else None
    if args.type == "vcov":
        S = predict_vcov(model, newdata)
        _out(write_csv(None, S.tolist()), args.out)
        return EXIT_OK
    res = predict_dspace(model, newdata, with_se=args.se)
    q = res.fitted.shape[1]
    header = [f"d{j + 1}" for j in range(q)]
    rows = res.fitted
    if args.se:
        header += [f"se_d{j + 1}" for j in range(q)]
        rows = np.hstack([res.fitted, res.se])
    _out(write_csv(None, rows.tolist(), header), args.out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    if args.nsim < 1:
        raise UsageError("--nsim must be at least 1")
    model, _ = load_model(args.model_file)
    newdata = read_sites(args.newdata) if args.newdata else None
    sims = simulate_gp(model, args.nsim, newdata, seed=args.seed)
    header = [f"sim{j + 1}" for j in range(args.nsim)]
    _out(write_csv(None, sims.tolist(), header), args.out)
    return EXIT_OK


def cmd_variogram(args) -> int:
    model, _ = load_model(args.model_file)
    m = model.anchors.shape[0]
    args.center = not args.no_center
    sample, _ = _sample_from_args(args, m)
    vg = variogram_data(model, sample)
    pts = [[int(i) + 1, int(j) + 1, d, g]
           for i, j, d, g in zip(vg.i, vg.j, vg.distance, vg.semivariance)]
    write_csv(args.points, pts, ["i", "j", "distance", "semivariance"])
    write_csv(args.curve, np.column_stack([vg.curve_d, vg.curve_gamma]).tolist(),
              ["distance", "gamma"])
    return EXIT_OK


def cmd_warpgrid(args) -> int:
    model, _ = load_model(args.model_file)
    xs = _parse_range(args.xp, "--xp")
    ys = _parse_range(args.yp, "--yp")
    gx, gy = np.meshgrid(xs, ys)
    pts = np.column_stack([gx.ravel(), gy.ravel()])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        D = predict_dspace(model, pts).fitted
    header = ["x", "y"] + [f"d{j + 1}" for j in range(D.shape[1])]
    _out(write_csv(None, np.hstack([pts, D]).tolist(), header), args.out)
    return EXIT_OK


def _read_left(spec: str, shape, names):
    try:
        return float(spec)
    except ValueError:
        pass
    header, L, _ = read_matrix(spec, allow_missing=False)
    if L.shape[1] != shape[1]:
        raise UsageError(f"{spec}: {L.shape[1]} columns, observations have {shape[1]}")
    if L.shape[0] == 1:
        return L[0]
    if L.shape[0] != shape[0]:
        raise UsageError(f"{spec}: {L.shape[0]} rows; need 1 or {shape[0]}")
    return L


def cmd_cencov(args) -> int:
    header, X = _read_obs(args.obs)
    if np.isinf(X).any():
        raise UsageError(f"{args.obs}: observations must be finite or empty")
    left = _read_left(args.left, X.shape, header)
    data = CensoredMatrix(X, left, header)
    res = fitcenmvn(data, scale=args.scale, psd_repair=args.psd_repair)
    os.makedirs(args.outdir, exist_ok=True)
    names = list(data.names)
    n_eff = data.effective_n()
    out = lambda name: os.path.join(args.outdir, name)  # noqa: E731
    if args.mode == "fitcenmvn":
        write_csv(out("mu.csv"), [res.mu.tolist()], names)
        write_csv(out("tau.csv"), [res.tau.tolist()], names)
    if args.mode in ("fitcenmvn", "cencor"):
        write_csv(out("corr.csv"), res.R.tolist(), names)
    if args.mode in ("fitcenmvn", "cencov"):
        write_csv(out("cov.csv"), res.Sigma.tolist(), names, comments=[f"n={n_eff}"])
    if res.min_eigenvalue < 0:
        msg = "repaired" if res.psd_repaired else "not repaired (use --psd-repair)"
        log.warning("pairwise correlation matrix has min eigenvalue %.3g; %s",
                    res.min_eigenvalue, msg)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="warpfield",
                                description="Nonstationary Gaussian process covariance "
                                            "via learned coordinate warps.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--obs", help="n x m observations CSV with a header of site ids")
        sp.add_argument("--cov", help="m x m covariance CSV with a '# n=<int>' line")
        sp.add_argument("--n", type=float, help="replicate count (overrides the cov file)")

    f = sub.add_parser("fit", help="fit an aniso, deform or expand model")
    f.add_argument("--model", choices=["aniso", "deform", "expand"], required=True)
    f.add_argument("--k", help="comma-separated ranks (default 10,10 deform; 10 expand)")
    f.add_argument("--bijective", action="store_true", help="penalize folding (deform only)")
    f.add_argument("--mult", type=float, default=1e3, help="fold penalty weight")
    f.add_argument("--scl", type=float, default=1.0, help="fold area scale")
    f.add_argument("--nx", type=int, default=40)
    f.add_argument("--ny", type=int, default=40)
    f.add_argument("--correlation", action="store_true", help="fix sigma2 = 1")
    f.add_argument("--cosine", action="store_true", help="multiply by cos(d / phi)")
    f.add_argument("--sites", required=True, help="m x 2 CSV with header lon,lat")
    data_args(f)
    f.add_argument("--center", dest="center", action="store_true", default=True,
                   help="subtract column means from --obs (default)")
    f.add_argument("--no-center", dest="center", action="store_false")
    f.add_argument("--standardize", action="store_true",
                   help="center and scale site coordinates before fitting")
    f.add_argument("--seed", type=int, default=None, help="recorded in the model file")
    f.add_argument("--out", required=True, help="model file to write")
    f.set_defaults(func=cmd_fit)

    pr = sub.add_parser("predict", help="D-space coordinates or model covariance")
    pr.add_argument("--model-file", required=True)
    pr.add_argument("--newdata", help="q x 2 CSV with header lon,lat (default: fit sites)")
    pr.add_argument("--se", action="store_true", help="add delta-method standard errors")
    pr.add_argument("--type", choices=["coords", "vcov"], default="coords")
    pr.add_argument("--out", default="-")
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="unconditional realizations")
    s.add_argument("--model-file", required=True)
    s.add_argument("--nsim", type=int, default=1)
    s.add_argument("--newdata")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_simulate)

    v = sub.add_parser("variogram", help="empirical and model semivariances")
    v.add_argument("--model-file", required=True)
    data_args(v)
    v.add_argument("--no-center", action="store_true")
    v.add_argument("--points", required=True, help="CSV of i, j, distance, semivariance")
    v.add_argument("--curve", required=True, help="CSV of distance, gamma")
    v.set_defaults(func=cmd_variogram)

    w = sub.add_parser("warpgrid", help="map a regular G-space grid to D-space")
    w.add_argument("--model-file", required=True)
    w.add_argument("--xp", required=True, help="start:stop:step")
    w.add_argument("--yp", required=True, help="start:stop:step")
    w.add_argument("--out", default="-")
    w.set_defaults(func=cmd_warpgrid)

    c = sub.add_parser("cencov", help="covariance from left-censored observations")
    c.add_argument("--obs", required=True)
    c.add_argument("--left", required=True, help="scalar bound, or CSV with 1 or n rows")
    c.add_argument("--mode", choices=["fitcenmvn", "cencor", "cencov"], default="fitcenmvn")
    c.add_argument("--scale", dest="scale", action="store_true", default=True,
                   help="estimate marginal means (default)")
    c.add_argument("--no-scale", dest="scale", action="store_false",
                   help="fix marginal means at zero")
    c.add_argument("--psd-repair", action="store_true")
    c.add_argument("--outdir", required=True)
    c.set_defaults(func=cmd_cencov)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="warpfield: %(levelname)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ModelFileError, CensoringError, BasisError, WarpError, FitError,
            NotPositiveDefinite, CovarianceError, ValueError, OSError) as err:
        sys.stderr.write(f"warpfield {args.command}: error: {err}\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
