"""Penalized likelihood fitting with REML smoothing parameter selection.

For fixed smoothing parameters ``lam`` the coefficients maximize

    lp(beta) = loglik(beta) - beta' S_lam beta / 2 [- fold penalty]

by a ridged Newton iteration. Smoothing parameters maximize the Laplace
approximate restricted likelihood

    reml(lam) = lp(beta_lam) + log|S_lam|_+ / 2 - log|H| / 2 + M_p log(2 pi) / 2

over ``log lam`` with a bounded quasi-Newton method whose gradient is
obtained by central differences.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .gplik import CovModel, GPLikelihood, NotPositiveDefinite, SampleCov, cholesky
from .splinebasis import PenaltyLayout, build_penalties
from .warp import FoldConfig, FoldPenalty, Warp, WarpSpec, build_tiling, is_bijective

log = logging.getLogger(__name__)

__all__ = [
    "FitContext",
    "NewtonResult",
    "REMLResult",
    "FittedModel",
    "FitError",
    "penalized_loglik",
    "inner_newton",
    "reml_objective",
    "outer_optimize",
    "coefficient_uncertainty",
    "fit",
    "log_det_plus",
]

LOG_LAMBDA_BOUNDS = (-12.0, 12.0)
FD_STEP = 1e-3


class FitError(RuntimeError):
    pass


class FitContext:
    """Everything needed to evaluate the penalized log-likelihood."""

    def __init__(self, warp: Warp, cov: CovModel, sample: SampleCov,
                 fold: Optional[FoldPenalty] = None):
        self.warp = warp
        self.cov = cov
        self.sample = sample
        self.lik = GPLikelihood(warp, cov, sample)
        self.n_beta = self.lik.n_beta
        if warp.spec.kind == "aniso":
            self.penalties = None
        else:
            self.penalties = build_penalties(warp.spec.kind, warp.bases, cov.n_params)
        self.fold = fold
        lo, hi = cov.bounds()
        self.lower = np.concatenate([np.full(warp.n_coef, -np.inf), lo])
        self.upper = np.concatenate([np.full(warp.n_coef, np.inf), hi])

    @property
    def n_smooth(self) -> int:
        return 0 if self.penalties is None else self.penalties.n_smooth

    def S_lambda(self, lam) -> np.ndarray:
        if self.penalties is None:
            return np.zeros((self.n_beta, self.n_beta))
        return self.penalties.S_lambda(lam)

    def __call__(self, beta, lam, order: int = 2):
        """``(lp, grad, hess)`` of the penalized log-likelihood."""
        beta = np.asarray(beta, dtype=float)
        val, g, H = self.lik(beta, order=order)
        if self.penalties is not None:
            S = self.S_lambda(lam)
            Sb = S @ beta
            val -= 0.5 * beta @ Sb
            if order >= 1:
                g = g - Sb
            if order >= 2:
                H = H - S
        if self.fold is not None:
            pw = self.warp.n_coef
            fv, fg, fH = self.fold(beta[:pw], derivs=order >= 1)
            val -= fv
            if order >= 1:
                g = g.copy()
                g[:pw] -= fg
            if order >= 2:
                H = H.copy()
                H[:pw, :pw] -= fH
        return val, g, H

    def clip(self, beta):
        return np.clip(beta, self.lower, self.upper)


def penalized_loglik(beta, lam, context: FitContext) -> float:
    return context(beta, lam, order=0)[0]


@dataclass
class NewtonResult:
    beta: np.ndarray
    value: float
    grad: np.ndarray
    H: np.ndarray
    iterations: int
    converged: bool
    ridge: float = 0.0
    message: str = ""


def _safe_eval(context, beta, lam, order):
    try:
        # trial points far out along a Newton direction may overflow
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            out = context(beta, lam, order=order)
    except (NotPositiveDefinite, FloatingPointError, ValueError, np.linalg.LinAlgError):
        return -np.inf, None, None
    if not np.isfinite(out[0]):
        return -np.inf, None, None
    return out


def _chol_ok(A):
    try:
        cholesky(A)
        return True
    except NotPositiveDefinite:
        return False


def _free_mask(context, beta, grad):
    at_lo = (beta <= context.lower) & (grad < 0)
    at_hi = (beta >= context.upper) & (grad > 0)
    return ~(at_lo | at_hi)


def _converged(grad, free, value, gtol):
    return np.max(np.abs(grad[free]), initial=0.0) <= gtol * (1 + abs(value))


def inner_newton(lam, start_beta, context: FitContext, gtol: float = 1e-6,
                 maxiter: int = 200, max_halvings: int = 30) -> NewtonResult:
    """Maximize the penalized log-likelihood over ``beta`` for fixed ``lam``.

    Each step solves ``(H + rho I) d = g`` for the negative Hessian ``H``,
    raising ``rho`` tenfold from ``1e-8 |H|`` until the system is positive
    definite, then halves the step until the objective increases.
    Coordinates resting on a covariance parameter bound with the gradient
    pointing outward are held fixed. At a stationary point that is not a
    local maximum the iteration steps along the direction of positive
    curvature.
    """
    beta = context.clip(np.array(start_beta, dtype=float))
    val, g, Hess = _safe_eval(context, beta, lam, 2)
    if not np.isfinite(val):
        raise FitError("penalized log-likelihood is not finite at the starting point")
    it = 0
    converged = False
    rho_used = 0.0
    message = ""
    escapes = 0
    while it < maxiter:
        free = _free_mask(context, beta, g)
        H = -Hess
        if _converged(g, free, val, gtol):
            Hf = H[np.ix_(free, free)]
            evals, evecs = np.linalg.eigh(Hf)
            if evals[0] >= -1e-9 * max(1.0, abs(evals[-1])) or escapes >= 5:
                converged = True
                break
            # saddle: step along the most negative curvature direction of H
            d = np.zeros_like(beta)
            d[free] = evecs[:, 0]
            moved = False
            for sign in (1.0, -1.0):
                t = 1.0
                for _ in range(max_halvings):
                    trial = context.clip(beta + sign * t * d)
                    tv = _safe_eval(context, trial, lam, 0)[0]
                    if tv > val:
                        moved = True
                        break
                    t *= 0.5
                if moved:
                    break
            escapes += 1
            if not moved:
                converged = True
                break
            beta = trial
            val, g, Hess = _safe_eval(context, beta, lam, 2)
            it += 1
            continue
        it += 1
        Hf = H[np.ix_(free, free)]
        gf = g[free]
        scale = max(np.abs(Hf).max(), 1e-300)
        rho = 0.0
        accepted = False
        for attempt in range(40):
            A = Hf + rho * np.eye(Hf.shape[0])
            try:
                L = cholesky(A, "ridged negative Hessian")
            except NotPositiveDefinite:
                rho = 1e-8 * scale if rho == 0 else rho * 10
                continue
            step = np.zeros_like(beta)
            step[free] = np.linalg.solve(L.T, np.linalg.solve(L, gf))
            t = 1.0
            for _ in range(max_halvings):
                trial = context.clip(beta + t * step)
                tv = _safe_eval(context, trial, lam, 0)[0]
                if tv > val:
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                rho_used = max(rho_used, rho)
                break
            rho = 1e-8 * scale if rho == 0 else rho * 10
        if not accepted:
            message = "line search failed to increase the objective"
            converged = _converged(g, free, val, 10 * gtol)
            break
        beta = trial
        val, g, Hess = _safe_eval(context, beta, lam, 2)
        if g is None:
            raise FitError("derivatives unavailable at accepted Newton iterate")
    else:
        message = f"no convergence in {maxiter} iterations"
    return NewtonResult(beta, float(val), g, -Hess, it, converged, rho_used, message)


def log_det_plus(S, rel_tol: float = 1e-10):
    """Log product of positive eigenvalues and count of dropped ones."""
    ev = np.linalg.eigvalsh(S)
    top = ev.max() if ev.size else 0.0
    if top <= 0:
        return 0.0, ev.size
    keep = ev > rel_tol * top
    return float(np.log(ev[keep]).sum()), int((~keep).sum())


def _pd_logdet(H):
    """Log determinant of ``H`` after the smallest ridge making it positive definite."""
    H = 0.5 * (H + H.T)
    scale = max(np.abs(H).max(), 1e-300)
    rho = 0.0
    for _ in range(40):
        try:
            L = cholesky(H + rho * np.eye(H.shape[0]), "negative Hessian")
            return 2 * float(np.log(np.diag(L)).sum()), rho
        except NotPositiveDefinite:
            rho = 1e-8 * scale if rho == 0 else rho * 10
    raise FitError("negative Hessian could not be regularized")


@dataclass
class REMLResult:
    value: float
    lam: np.ndarray
    newton: NewtonResult
    lp: float
    log_det_S: float
    log_det_H: float
    M_p: int
    ridge: float


def reml_objective(lam, context: FitContext, start_beta=None) -> REMLResult:
    """Laplace-approximate restricted log-likelihood at ``lam``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise FitError("smoothing parameters must be positive")
    if start_beta is None:
        start_beta = np.zeros(context.n_beta)
    nr = inner_newton(lam, start_beta, context)
    ldS, Mp = log_det_plus(context.S_lambda(lam))
    ldH, ridge = _pd_logdet(nr.H)
    value = nr.value + 0.5 * ldS - 0.5 * ldH + 0.5 * Mp * np.log(2 * np.pi)
    return REMLResult(float(value), lam, nr, nr.value, ldS, ldH, Mp, ridge)


@dataclass
class OuterResult:
    log_lambda: np.ndarray
    reml: REMLResult
    iterations: int
    n_evals: int
    converged: bool
    at_upper: List[int]
    at_lower: List[int]
    history: List[float]
    message: str


def outer_optimize(context: FitContext, start_beta, log_lambda0=None,
                   ftol: float = 1e-5, maxiter: int = 100) -> OuterResult:
    """Maximize REML over ``log lam`` in a box by L-BFGS-B with central differences.

    Every REML evaluation warm-starts the inner Newton iteration: objective
    evaluations from the last accepted point, difference evaluations from
    the point being differenced.
    """
    J = context.n_smooth
    if J == 0:
        raise FitError("model has no smoothing parameters")
    rho0 = np.zeros(J) if log_lambda0 is None else np.asarray(log_lambda0, dtype=float)
    lo, hi = LOG_LAMBDA_BOUNDS
    state = {"beta": np.asarray(start_beta, dtype=float), "evals": 0}
    history: List[float] = []
    best: dict = {}

    def evaluate(rho, start):
        state["evals"] += 1
        return reml_objective(np.exp(rho), context, start)

    def fun_and_grad(rho):
        rho = np.asarray(rho, dtype=float)
        center = evaluate(rho, state["beta"])
        grad = np.zeros(J)
        for j in range(J):
            e = np.zeros(J)
            e[j] = FD_STEP
            fp = evaluate(rho + e, center.newton.beta).value
            fm = evaluate(rho - e, center.newton.beta).value
            grad[j] = (fp - fm) / (2 * FD_STEP)
        if not best or center.value > best["reml"].value:
            best["reml"] = center
            best["rho"] = rho.copy()
        state["beta"] = center.newton.beta
        return -center.value, -grad

    def callback(xk):
        history.append(best["reml"].value)

    res = minimize(fun_and_grad, rho0, jac=True, method="L-BFGS-B",
                   bounds=[(lo, hi)] * J, callback=callback,
                   options={"maxiter": maxiter, "ftol": ftol, "gtol": 1e-8})
    rho_hat = np.asarray(res.x, dtype=float)
    if best and np.allclose(best["rho"], rho_hat):
        final = best["reml"]
    else:
        final = evaluate(rho_hat, state["beta"])
        if best and best["reml"].value > final.value:
            rho_hat, final = best["rho"], best["reml"]
    at_upper = [j for j in range(J) if rho_hat[j] >= hi - 1e-8]
    at_lower = [j for j in range(J) if rho_hat[j] <= lo + 1e-8]
    return OuterResult(rho_hat, final, int(res.nit), state["evals"], bool(res.success),
                       at_upper, at_lower, history, str(res.message))


@dataclass
class FittedModel:
    """A fitted warp plus covariance model.

    ``beta`` holds warp coefficients followed by unconstrained covariance
    parameters; ``H`` is the negative Hessian of the penalized
    log-likelihood there.
    """

    spec: WarpSpec
    warp: Warp
    cov: CovModel
    beta: np.ndarray
    lam: np.ndarray
    H: np.ndarray
    reml_value: Optional[float]
    loglik_value: float
    lp_value: float
    n: float
    converged: bool
    diagnostics: dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)
    standardization: Optional[dict] = None

    @property
    def anchors(self):
        return self.warp.anchors.coords

    @property
    def beta_warp(self):
        return self.beta[:self.warp.n_coef]

    @property
    def theta(self):
        return self.beta[self.warp.n_coef:]

    @property
    def cov_params(self):
        return self.cov.natural(self.theta)

    def dspace(self, x=None):
        x = self.anchors if x is None else x
        return self.warp.transform(x, self.beta_warp)

    def alpha_hat(self):
        """Positive axis scales of an anisotropic fit."""
        if self.spec.kind != "aniso":
            raise FitError("alpha_hat is defined for aniso fits")
        return np.exp(self.beta_warp[:2])

    def summary(self) -> dict:
        out = {"model": self.spec.kind, "loglik": self.loglik_value,
               "reml": self.reml_value, "converged": self.converged}
        out.update(self.cov.report(self.theta))
        if self.spec.kind == "aniso":
            a = self.alpha_hat()
            out["alpha1"], out["alpha2"] = float(a[0]), float(a[1])
        else:
            out["lambda"] = [float(v) for v in self.lam]
        return out


def coefficient_uncertainty(model: FittedModel) -> np.ndarray:
    """Sampling covariance ``H^{-1}`` of the coefficient estimates."""
    H = 0.5 * (model.H + model.H.T)
    try:
        L = cholesky(H, "negative Hessian")
    except NotPositiveDefinite as err:
        raise FitError(
            "negative Hessian is singular or indefinite; refit with larger "
            "smoothing parameters or a nugget") from err
    Linv = np.linalg.solve(L, np.eye(H.shape[0]))
    return Linv.T @ Linv


# ---------------------------------------------------------------------------
# orchestration


def _aniso_start(coords, sample: SampleCov, cov: CovModel):
    """Closed-form start: ``alpha_j = c / range_j`` with ``c`` matching mean correlation.

    With coordinates divided by their ranges, ``c`` solves
    ``(1 - kappa0) exp(-c * median distance) = mean sample correlation``.
    """
    V = sample.V
    sd = np.sqrt(np.clip(np.diag(V), 1e-300, None))
    R = V / np.outer(sd, sd)
    iu = np.triu_indices_from(R, 1)
    kappa0 = 0.05
    rbar = np.clip(np.mean(R[iu]), 0.05, 0.9 * (1 - kappa0))
    rng_ = np.ptp(coords, axis=0)
    u = coords / rng_
    d = np.sqrt(((u[:, None, :] - u[None, :, :]) ** 2).sum(-1))[iu]
    c = -np.log(rbar / (1 - kappa0)) / np.median(d)
    alpha = c / rng_
    phi = None
    if cov.cosine:
        # median site distance in the unwarped coordinates
        phi = float(np.median(np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))[iu]))
    return np.concatenate([np.log(alpha), cov.initial(V, phi)])


def standardize_coords(coords):
    """Center on the mean and divide by the larger coordinate range."""
    center = coords.mean(axis=0)
    scale = float(np.ptp(coords, axis=0).max())
    return (coords - center) / scale, {"center": center.tolist(), "scale": scale}


def _refine_ridge(H):
    H = 0.5 * (H + H.T)
    if _chol_ok(H):
        return H, 0.0
    _, rho = _pd_logdet(H)
    return H + rho * np.eye(H.shape[0]), rho


def _fit_aniso(coords, sample, cov, start=None):
    warp = Warp(WarpSpec("aniso"), coords)
    ctx = FitContext(warp, cov, sample)
    beta0 = _aniso_start(warp.anchors.coords, sample, cov) if start is None else start
    nr = inner_newton(np.zeros(0), beta0, ctx)
    H, ridge = _refine_ridge(nr.H)
    ll = ctx.lik.loglik(nr.beta)
    model = FittedModel(WarpSpec("aniso"), warp, cov, nr.beta, np.zeros(0), H, None, ll,
                        nr.value, sample.n, nr.converged,
                        diagnostics={"iterations": nr.iterations,
                                     "grad_max": float(np.abs(nr.grad).max()),
                                     "ridge": ridge})
    if not nr.converged:
        model.warnings.append("aniso: " + (nr.message or "inner Newton did not converge"))
    return model


def _smooth_start(warp, aniso_model):
    bw = np.zeros(warp.n_coef)
    bw[:2] = aniso_model.beta_warp[:2]
    return np.concatenate([bw, aniso_model.theta])


def _fit_penalized(warp, cov, sample, start, fold=None, tag=""):
    ctx = FitContext(warp, cov, sample, fold)
    out = outer_optimize(ctx, start)
    nr = out.reml.newton
    H, ridge = _refine_ridge(nr.H)
    ll = ctx.lik.loglik(nr.beta)
    diag = {
        "log_lambda": out.log_lambda.tolist(),
        "outer_iterations": out.iterations,
        "reml_evaluations": out.n_evals,
        "inner_iterations": nr.iterations,
        "grad_max": float(np.abs(nr.grad).max()),
        "ridge": ridge,
        "at_upper_bound": out.at_upper,
        "at_lower_bound": out.at_lower,
        "M_p": out.reml.M_p,
        "outer_message": out.message,
    }
    model = FittedModel(warp.spec, warp, cov, nr.beta, np.exp(out.log_lambda), H,
                        out.reml.value, ll, nr.value, sample.n,
                        nr.converged and out.converged, diagnostics=diag)
    if not nr.converged:
        model.warnings.append(f"{tag}inner Newton: {nr.message or 'not converged'}")
    if not out.converged:
        model.warnings.append(f"{tag}outer optimizer: {out.message}")
    for j in out.at_upper:
        model.warnings.append(f"{tag}smoothing parameter {j + 1} at upper bound "
                              "(smooth shrunk to its null space; dimension may be redundant)")
    return model, ctx


def fit(coords, sample: SampleCov, spec: WarpSpec, correlation: bool = False,
        cosine: bool = False, standardize: bool = False) -> FittedModel:
    """Fit an anisotropic, deformation, or expansion model to a sample covariance.

    Deformation and expansion fits start from an anisotropic fit. Bijective
    deformations additionally take ``epsilon`` from that fit and start
    from the unconstrained deformation when it is already fold free.
    With ``standardize`` the sites are centered and scaled before fitting
    and the transformation is kept on the model for later prediction.
    """
    coords = np.asarray(coords, dtype=float)
    std = None
    if standardize:
        coords, std = standardize_coords(coords)
    model = _fit(coords, sample, spec, CovModel(correlation, cosine))
    model.standardization = std
    return model


def _fit(coords, sample, spec, cov):
    aniso = _fit_aniso(coords, sample, cov)
    if spec.kind == "aniso":
        return aniso
    m = coords.shape[0]
    if max(spec.ranks) > m:
        raise FitError(f"rank {max(spec.ranks)} exceeds the number of sites ({m})")
    warp = Warp(WarpSpec(spec.kind, spec.ranks), coords)
    start = _smooth_start(warp, aniso)
    model, _ = _fit_penalized(warp, cov, sample, start)
    model.diagnostics["aniso_alpha"] = aniso.alpha_hat().tolist()
    if not spec.bijective:
        return model

    bwarp = Warp(spec, coords, warp.bases)
    bbox = np.column_stack([coords.min(axis=0), coords.max(axis=0)])
    cfg = spec.fold or FoldConfig()
    tiling = build_tiling(bbox, cfg.nx, cfg.ny)
    a1, a2 = aniso.alpha_hat()
    cfg = cfg.with_epsilon(a1, a2, tiling)
    unconstrained = is_bijective(model.beta_warp, bwarp, tiling)
    bstart = model.beta if unconstrained.bijective else start
    fold = FoldPenalty(bwarp, tiling, cfg)
    bmodel, _ = _fit_penalized(bwarp, cov, sample, bstart, fold, tag="bijective: ")
    bmodel.spec = WarpSpec("deform", spec.ranks, True, cfg)
    report = is_bijective(bmodel.beta_warp, bwarp, tiling)
    bmodel.diagnostics.update({
        "aniso_alpha": [float(a1), float(a2)],
        "epsilon": cfg.epsilon,
        "unconstrained_negative_triangles": unconstrained.n_negative,
        "started_from": "unconstrained" if unconstrained.bijective else "aniso",
        "negative_triangles": report.n_negative,
        "n_triangles": report.n_triangles,
        "bijective": report.bijective,
        "flipped": report.flipped,
    })
    if not report.bijective:
        bmodel.warnings.append(f"bijective: fitted map still folds ({report})")
    return bmodel
