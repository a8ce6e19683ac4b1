"""Powered exponential covariance and the Gaussian likelihood of a sample covariance.

The log-likelihood of a zero-mean Gaussian process observed ``n`` times at
``m`` sites, given the sample covariance ``V``, is

.. math::

    \\ell(\\Sigma) = -\\frac{n - 1}{2} \\log|2\\pi\\Sigma|
                     - \\frac{n}{2} \\mathrm{tr}(\\Sigma^{-1} V).

``Sigma`` is built from D-space distances with correlation
``(1 - kappa) exp(-d**gamma)`` off the diagonal (optionally times
``cos(d / phi)``) and one on it.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import lapack, solve_triangular

__all__ = [
    "CovParams",
    "CovModel",
    "SampleCov",
    "NotPositiveDefinite",
    "powexp_corr",
    "build_sigma",
    "gp_loglik",
    "GPLikelihood",
    "loglik_grad_hess",
]

LOG2PI = np.log(2 * np.pi)


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky factorization failed; ``pivot`` is the 1-based failing order."""

    def __init__(self, pivot: int, what: str = "covariance matrix"):
        self.pivot = int(pivot)
        super().__init__(f"{what} is not positive definite (leading minor of order {pivot})")


def cholesky(A, what="covariance matrix"):
    L, info = lapack.dpotrf(np.asarray(A, dtype=float), lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefinite(info, what)
    if info < 0:
        raise ValueError(f"illegal argument to dpotrf ({info})")
    return L


@dataclass(frozen=True)
class CovParams:
    sigma2: float = 1.0
    kappa: float = 0.0
    gamma: float = 1.0
    phi: Optional[float] = None

    def __post_init__(self):
        if not self.sigma2 >= 0:
            raise ValueError("sigma2 must be nonnegative")
        if not 0 <= self.kappa < 1:
            raise ValueError("kappa must lie in [0, 1)")
        if not 0 < self.gamma <= 2:
            raise ValueError("gamma must lie in (0, 2]")
        if self.phi is not None and not self.phi > 0:
            raise ValueError("phi must be positive")


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class CovModel:
    """Maps unconstrained covariance parameters to :class:`CovParams`.

    Unconstrained coordinates, in order: ``log sigma2`` (absent when
    ``correlation``), ``logit kappa``, ``logit(gamma / 2)`` and ``log phi``
    (present only when ``cosine``).
    """

    # box on the transformed scale; keeps boundary estimates (kappa -> 0,
    # gamma -> 2) from drifting without limit during Newton iterations
    BOUND = 10.0

    def __init__(self, correlation: bool = False, cosine: bool = False):
        self.correlation = bool(correlation)
        self.cosine = bool(cosine)
        names = [] if correlation else ["log_sigma2"]
        names += ["logit_kappa", "logit_half_gamma"]
        if cosine:
            names.append("log_phi")
        self.names = tuple(names)

    @property
    def n_params(self) -> int:
        return len(self.names)

    def index(self, name):
        return self.names.index(name) if name in self.names else None

    def natural(self, theta) -> CovParams:
        theta = np.asarray(theta, dtype=float)
        i = 0
        sigma2 = 1.0
        if not self.correlation:
            sigma2 = float(np.exp(theta[0]))
            i = 1
        kappa = float(_expit(theta[i]))
        gamma = float(2 * _expit(theta[i + 1]))
        phi = float(np.exp(theta[i + 2])) if self.cosine else None
        return CovParams(sigma2, min(kappa, np.nextafter(1.0, 0)), gamma, phi)

    def transform(self, params: CovParams) -> np.ndarray:
        out = [] if self.correlation else [np.log(params.sigma2)]
        out.append(_logit(np.clip(params.kappa, 1e-300, 1 - 1e-16)))
        out.append(_logit(np.clip(params.gamma / 2, 1e-300, 1 - 1e-16)))
        if self.cosine:
            out.append(np.log(params.phi))
        return np.array(out, dtype=float)

    def initial(self, V, phi: Optional[float] = None) -> np.ndarray:
        sigma2 = float(np.mean(np.diag(V)))
        return self.transform(CovParams(sigma2, 0.05, 1.0, phi if self.cosine else None))

    def bounds(self):
        lo = np.full(self.n_params, -self.BOUND)
        hi = np.full(self.n_params, self.BOUND)
        if not self.correlation:
            lo[0], hi[0] = -np.inf, np.inf
        return lo, hi

    def report(self, theta) -> dict:
        p = self.natural(theta)
        out = {"sigma2": p.sigma2, "kappa": p.kappa, "gamma": p.gamma}
        if out["gamma"] >= 1.999:
            out["gamma"] = 2.0
        if self.cosine:
            out["phi"] = p.phi
        return out


@dataclass(frozen=True)
class SampleCov:
    """Sample covariance ``V`` of ``n`` replicates at ``coords``."""

    V: np.ndarray
    n: float
    coords: Optional[np.ndarray] = None

    def __post_init__(self):
        V = np.array(self.V, dtype=float)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise ValueError(f"V must be square, got shape {V.shape}")
        if not np.all(np.isfinite(V)):
            raise ValueError("V must be finite")
        if np.abs(V - V.T).max() > 1e-8 * max(np.abs(V).max(), 1e-300):
            raise ValueError("V must be symmetric")
        V = 0.5 * (V + V.T)
        if self.n < 2:
            raise ValueError("need n >= 2 replicates")
        if self.coords is not None:
            c = np.asarray(self.coords, dtype=float)
            if c.shape != (V.shape[0], 2):
                raise ValueError(f"coords shape {c.shape} does not match V ({V.shape[0]} sites)")
            object.__setattr__(self, "coords", c)
        V.setflags(write=False)
        object.__setattr__(self, "V", V)

    @property
    def m(self) -> int:
        return self.V.shape[0]

    def check_psd(self, tol: float = 1e-8):
        lo = np.linalg.eigvalsh(self.V).min()
        return lo >= -tol * np.linalg.norm(self.V, 2)

    @classmethod
    def from_observations(cls, Y, coords=None, center: bool = True):
        """``V`` with divisor ``n - 1`` from an ``n x m`` observation matrix."""
        Y = np.asarray(Y, dtype=float)
        n = Y.shape[0]
        R = Y - Y.mean(axis=0) if center else Y
        return cls(R.T @ R / (n - 1), n, coords)


def powexp_corr(l, params: CovParams):
    """Powered exponential correlation with a nugget jump at zero distance."""
    l = np.asarray(l, dtype=float)
    if np.any(l < 0):
        raise ValueError("distances must be nonnegative")
    with np.errstate(divide="ignore"):
        r = (1 - params.kappa) * np.exp(-(l ** params.gamma))
    if params.phi is not None:
        r = r * np.cos(l / params.phi)
    r = np.where(l == 0, 1.0, r)
    return float(r) if r.ndim == 0 else r


def _sqdist(X):
    diff = X[:, None, :] - X[None, :, :]
    return diff, np.einsum("ijk,ijk->ij", diff, diff)


def build_sigma(coords, params: CovParams) -> np.ndarray:
    """``sigma2 * rho(|x_i - x_j|)`` over D-space coordinates."""
    X = np.asarray(coords, dtype=float)
    if not np.all(np.isfinite(X)):
        raise ValueError("D-space coordinates must be finite")
    _, s = _sqdist(X)
    S = params.sigma2 * powexp_corr(np.sqrt(s), params)
    np.fill_diagonal(S, params.sigma2)
    return 0.5 * (S + S.T)


def gp_loglik(Sigma, sample: SampleCov) -> float:
    """Log-likelihood of ``sample`` under covariance ``Sigma``.

    Raises :class:`NotPositiveDefinite` when ``Sigma`` has no Cholesky factor.
    """
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    n = sample.n
    L = cholesky(Sigma)
    logdet = 2 * np.log(np.diag(L)).sum()
    Linv_V = solve_triangular(L, sample.V, lower=True)
    tr = np.trace(solve_triangular(L, Linv_V.T, lower=True))
    m = Sigma.shape[0]
    return -0.5 * (n - 1) * (m * LOG2PI + logdet) - 0.5 * n * tr


# ---------------------------------------------------------------------------
# derivatives


def _offdiag_factors(s, theta, model: CovModel):
    """Off-diagonal covariance ``c(s; theta)`` with derivatives.

    Variables are ordered ``(s, theta_1, ..., theta_p)``. Returns ``c`` and
    arrays of first and second derivatives with leading variable axes.
    Entries with ``s == 0`` are left at the value ``sigma2`` with zero
    distance derivatives.
    """
    nv = 1 + model.n_params
    shape = s.shape
    zero = s <= 0
    s_safe = np.where(zero, 1.0, s)
    u = np.log(s_safe)
    i = 0
    if model.correlation:
        ls_i = None
    else:
        ls_i, i = 1, 1
    lk_i = 1 + i
    gg_i = 2 + i
    lp_i = 3 + i if model.cosine else None
    th = np.asarray(theta, dtype=float)

    factors = []  # (value, {var: d}, {(v, w): d2})

    if ls_i is not None:
        sig = np.exp(th[0])
        factors.append((sig, {ls_i: sig}, {(ls_i, ls_i): sig}))

    kap = _expit(th[lk_i - 1])
    dk = kap * (1 - kap)
    factors.append((1 - kap, {lk_i: -dk}, {(lk_i, lk_i): -dk * (1 - 2 * kap)}))

    h = _expit(th[gg_i - 1])
    h1 = h * (1 - h)
    h2 = h1 * (1 - 2 * h)
    r = np.exp(h * u)
    r_s = h * r / s_safe
    r_ss = h * (h - 1) * r / s_safe ** 2
    r_g = r * u * h1
    r_gg = r * (u * h1) ** 2 + r * u * h2
    r_sg = h1 * r * (1 + h * u) / s_safe
    F3 = np.exp(-r)
    factors.append((
        F3,
        {0: -F3 * r_s, gg_i: -F3 * r_g},
        {(0, 0): F3 * (r_s * r_s - r_ss), (gg_i, gg_i): F3 * (r_g * r_g - r_gg),
         (0, gg_i): F3 * (r_s * r_g - r_sg)},
    ))

    if lp_i is not None:
        ephi = np.exp(-th[lp_i - 1])
        z = np.sqrt(s_safe) * ephi
        z_s = z / (2 * s_safe)
        z_ss = -z / (4 * s_safe ** 2)
        z_p = -z
        z_pp = z
        z_sp = -z / (2 * s_safe)
        cz, sz = np.cos(z), np.sin(z)
        factors.append((
            cz,
            {0: -sz * z_s, lp_i: -sz * z_p},
            {(0, 0): -cz * z_s * z_s - sz * z_ss, (lp_i, lp_i): -cz * z_p * z_p - sz * z_pp,
             (0, lp_i): -cz * z_s * z_p - sz * z_sp},
        ))

    nf = len(factors)
    vals = [np.broadcast_to(f[0], shape) for f in factors]

    def prod_except(*skip):
        out = np.ones(shape)
        for j in range(nf):
            if j not in skip:
                out = out * vals[j]
        return out

    c = prod_except()
    dc = np.zeros((nv,) + shape)
    d2c = np.zeros((nv, nv) + shape)
    for j, (_, g, H) in enumerate(factors):
        rest = prod_except(j)
        for v, d in g.items():
            dc[v] += d * rest
        for (v, w), d in H.items():
            d2c[v, w] += d * rest
            if v != w:
                d2c[w, v] += d * rest
    for j in range(nf):
        for k in range(nf):
            if j == k:
                continue
            rest = prod_except(j, k)
            for v, dj in factors[j][1].items():
                for w, dk_ in factors[k][1].items():
                    d2c[v, w] += dj * dk_ * rest
    if zero.any():
        sig = np.exp(th[0]) if ls_i is not None else 1.0
        c = np.where(zero, sig, c)
        dc[:, zero] = 0.0
        d2c[:, :, zero] = 0.0
        if ls_i is not None:
            dc[ls_i, zero] = sig
            d2c[ls_i, ls_i, zero] = sig
    return c, dc, d2c


class GPLikelihood:
    """Log-likelihood of a warped stationary GP as a function of ``beta``.

    ``beta`` concatenates the warp coefficients and the unconstrained
    covariance parameters of ``cov_model``.
    """

    def __init__(self, warp, cov_model: CovModel, sample: SampleCov):
        self.warp = warp
        self.cov = cov_model
        self.sample = sample
        self.coords = warp.anchors.coords
        if sample.m != self.coords.shape[0]:
            raise ValueError("sample covariance and warp anchors disagree on site count")
        self.n_warp = warp.n_coef
        self.n_beta = warp.n_coef + cov_model.n_params

    def split(self, beta):
        beta = np.asarray(beta, dtype=float)
        return beta[:self.n_warp], beta[self.n_warp:]

    def sigma(self, beta):
        bw, th = self.split(beta)
        X = self.warp.transform(self.coords, bw)
        return build_sigma(X, self.cov.natural(th))

    def loglik(self, beta) -> float:
        return gp_loglik(self.sigma(beta), self.sample)

    def __call__(self, beta, order: int = 2):
        """Return ``(value, gradient, hessian)``; derivatives omitted below ``order``."""
        bw, th = self.split(beta)
        m = self.coords.shape[0]
        n = self.sample.n
        V = self.sample.V
        X = self.warp.transform(self.coords, bw)
        diff, s = _sqdist(X)
        c, dc, d2c = _offdiag_factors(s, th, self.cov)
        offd = ~np.eye(m, dtype=bool)
        sig2 = 1.0 if self.cov.correlation else float(np.exp(th[0]))
        Sigma = np.where(offd, c, sig2)
        Sigma = 0.5 * (Sigma + Sigma.T)
        L = cholesky(Sigma)
        logdet = 2 * np.log(np.diag(L)).sum()
        Linv = solve_triangular(L, np.eye(m), lower=True)
        P = Linv.T @ Linv
        PV = P @ V
        val = -0.5 * (n - 1) * (m * LOG2PI + logdet) - 0.5 * n * np.trace(PV)
        if order == 0:
            return val, None, None

        pw, pc = self.n_warp, self.cov.n_params
        p = pw + pc
        W = PV @ P
        W = 0.5 * (W + W.T)
        G = -0.5 * (n - 1) * P + 0.5 * n * W

        J = self.warp.jacobian(self.coords, bw)  # m, q, pw
        DJ = J[:, None, :, :] - J[None, :, :, :]  # m, m, q, pw
        s_w = 2 * np.einsum("ijc,ijcw->ijw", diff, DJ)  # m, m, pw

        c_s = np.where(offd, dc[0], 0.0)
        dS = np.empty((p, m, m))
        dS[:pw] = np.moveaxis(c_s[:, :, None] * s_w, 2, 0)
        for t in range(pc):
            dS[pw + t] = np.where(offd, dc[1 + t], 0.0)
        if not self.cov.correlation:
            idx = np.arange(m)
            dS[pw, idx, idx] = sig2
        grad = np.einsum("ij,aij->a", G, dS)
        if order == 1:
            return val, grad, None

        PdS = np.matmul(P, dS)
        WdS = np.matmul(W, dS)
        H = 0.5 * (n - 1) * np.einsum("aij,bji->ab", PdS, PdS)
        H -= n * np.einsum("aij,bji->ab", PdS, WdS)

        # second derivatives of Sigma contracted with G
        Gc_ss = G * np.where(offd, d2c[0, 0], 0.0)
        T2 = np.einsum("ija,ij,ijb->ab", s_w, Gc_ss, s_w)
        Gc_s = G * c_s
        Lap = np.diag(Gc_s.sum(axis=1)) - Gc_s
        # sum_ij Gc_s (J_i - J_j)_a (J_i - J_j)_b = 2 sum_c J_c' Lap J_c
        T2 += 4 * np.einsum("ica,ij,jcb->ab", J, Lap, J)
        curv = self.warp.curvature(self.coords, bw)
        for cidx in range(2):
            dcurv = curv[:, None, cidx] - curv[None, :, cidx]
            T2[cidx, cidx] += 2 * np.sum(Gc_s * diff[:, :, cidx] * dcurv)
        cross = np.zeros((pw, pc))
        for t in range(pc):
            cst = G * np.where(offd, d2c[0, 1 + t], 0.0)
            cross[:, t] = np.einsum("ij,ijw->w", cst, s_w)
        cc = np.zeros((pc, pc))
        for t in range(pc):
            for u in range(pc):
                cc[t, u] = np.sum(G * np.where(offd, d2c[1 + t, 1 + u], 0.0))
        if not self.cov.correlation:
            cc[0, 0] += sig2 * np.trace(G)
        H[:pw, :pw] += T2
        H[:pw, pw:] += cross
        H[pw:, :pw] += cross.T
        H[pw:, pw:] += cc
        H = 0.5 * (H + H.T)
        return val, grad, H


def loglik_grad_hess(beta, context: GPLikelihood):
    """Gradient and Hessian of the log-likelihood at ``beta``."""
    _, g, H = context(beta, order=2)
    return g, H
