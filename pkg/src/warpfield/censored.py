"""Covariance estimation from left-censored data.

Margins are fitted by censored Gaussian maximum likelihood. Each pair of
standardized margins then gets its own correlation from a bivariate
Gaussian likelihood whose terms depend on which of the two values are
censored:

    both censored      Phi2(u, u'; rho)
    one censored       phi(w') Phi((u - rho w') / sqrt(1 - rho^2))
    neither censored   phi2(w, w'; rho)
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import log_ndtr, ndtr

log = logging.getLogger(__name__)

__all__ = [
    "CensoredMatrix",
    "CensoredFit",
    "CensoringError",
    "bvn_cdf",
    "bvn_pdf",
    "fit_marginal_censored",
    "fit_pairwise_rho",
    "pairwise_loglik",
    "fitcenmvn",
    "cencor",
    "cencov",
]

MIN_UNCENSORED = 5
TWO_PI = 2 * np.pi
LOG_2PI = np.log(TWO_PI)

_NODES = {n: leggauss(n) for n in (6, 12, 20)}


class CensoringError(ValueError):
    """Unusable margin or pair, with the offending column(s) attached."""

    def __init__(self, msg, columns=()):
        super().__init__(msg)
        self.columns = tuple(columns)


# ---------------------------------------------------------------------------
# bivariate normal


def _bvnu(h, k, r):
    """Upper orthant ``P(X > h, Y > k)`` for arrays of equal shape with ``|r| < 1``.

    Gauss-Legendre quadrature of the single-integral forms used by Genz's
    BVND routine; 6, 12 or 20 nodes depending on ``|r|``.
    """
    out = np.empty_like(h)
    ar = np.abs(r)
    groups = [(ar < 0.3, 6), ((ar >= 0.3) & (ar < 0.75), 12), (ar >= 0.75, 20)]
    for sel, ng in groups:
        if not sel.any():
            continue
        x, w = _NODES[ng]
        hh, kk, rr = h[sel], k[sel], r[sel]
        res = np.empty_like(hh)
        near = np.abs(rr) >= 0.925
        far = ~near
        if far.any():
            res[far] = _bvnu_far(hh[far], kk[far], rr[far], x, w)
        if near.any():
            res[near] = _bvnu_near(hh[near], kk[near], rr[near], x, w)
        out[sel] = res
    return out


def _bvnu_far(h, k, r, x, w):
    hk = h * k
    hs = 0.5 * (h * h + k * k)
    asr = np.arcsin(r)
    sn = np.sin(np.outer(asr, (x + 1) / 2))
    terms = np.exp((sn * hk[:, None] - hs[:, None]) / (1 - sn * sn))
    return terms @ w * asr / (2 * TWO_PI) + ndtr(-h) * ndtr(-k)


def _bvnu_near(h, k, r, x, w):
    neg = r < 0
    k = np.where(neg, -k, k)
    hk = h * k
    bvn = np.zeros_like(h)
    inner = np.abs(r) < 1
    if inner.any():
        hi, ki, hki, ri = h[inner], k[inner], hk[inner], r[inner]
        as_ = (1 - ri) * (1 + ri)
        a = np.sqrt(as_)
        bs = (hi - ki) ** 2
        c = (4 - hki) / 8
        d = (12 - hki) / 16
        v = a * np.exp(-(bs / as_ + hki) / 2) * (
            1 - c * (bs - as_) * (1 - d * bs / 5) / 3 + c * d * as_ * as_ / 5)
        b = np.sqrt(bs)
        tail = np.where(
            hki > -160,
            np.exp(-np.clip(hki, -160, None) / 2) * np.sqrt(TWO_PI) * ndtr(-b / a) * b
            * (1 - c * bs * (1 - d * bs / 5) / 3),
            0.0)
        v = v - tail
        a2 = a / 2
        xs = (a2[:, None] * (x[None, :] + 1)) ** 2
        rs = np.sqrt(1 - xs)
        asr = -(bs[:, None] / xs + hki[:, None]) / 2
        body = np.exp(-hki[:, None] * (1 - rs) / (2 * (1 + rs))) / rs \
            - (1 + c[:, None] * xs * (1 + d[:, None] * xs))
        quad = np.where(asr > -100, np.exp(np.maximum(asr, -100)) * body, 0.0)
        v = v + a2 * (quad @ w)
        bvn[inner] = -v / TWO_PI
    pos = ~neg
    res = np.empty_like(h)
    res[pos] = bvn[pos] + ndtr(-np.maximum(h[pos], k[pos]))
    hn, kn, bn = h[neg], k[neg], bvn[neg]
    extra = np.where(kn > hn,
                     np.where(hn < 0, ndtr(kn) - ndtr(hn), ndtr(-hn) - ndtr(-kn)),
                     0.0)
    res[neg] = -bn + extra
    return res


def bvn_cdf(a, b, rho):
    """Bivariate standard normal CDF ``P(W <= a, W' <= b)`` with correlation ``rho``.

    Parameters
    ----------
    a, b : float or array_like
        Upper limits; may be infinite.
    rho : float or array_like
        Correlation in ``[-1, 1]``.

    Returns
    -------
    float or ndarray
        Broadcast over the inputs.
    """
    a, b, r = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float),
                                  np.asarray(rho, dtype=float))
    if np.any(np.isnan(r)) or np.any(np.abs(r) > 1):
        raise ValueError("correlation must lie in [-1, 1]")
    if np.any(np.isnan(a)) or np.any(np.isnan(b)):
        raise ValueError("limits must not be NaN")
    shape = a.shape
    a, b, r = a.ravel().copy(), b.ravel().copy(), r.ravel().copy()
    out = np.empty(a.shape)
    Pa, Pb = ndtr(a), ndtr(b)
    zero = r == 0
    one = r == 1
    mone = r == -1
    # an infinite limit reduces to a univariate probability
    inf = np.isinf(a) | np.isinf(b)
    out[zero] = Pa[zero] * Pb[zero]
    out[one] = np.minimum(Pa[one], Pb[one])
    out[mone] = np.maximum(0.0, Pa[mone] + Pb[mone] - 1)
    rest = ~(zero | one | mone)
    sel = rest & inf
    out[sel] = np.where((a[sel] == -np.inf) | (b[sel] == -np.inf), 0.0,
                        np.where(a[sel] == np.inf, Pb[sel], Pa[sel]))
    sel = rest & ~inf
    if sel.any():
        out[sel] = _bvnu(-a[sel], -b[sel], r[sel])
    out = np.clip(out, 0.0, 1.0).reshape(shape)
    return float(out) if out.ndim == 0 else out


def bvn_pdf(a, b, rho):
    """Bivariate standard normal density; also ``d bvn_cdf / d rho``."""
    s = 1 - rho * rho
    q = (a * a - 2 * rho * a * b + b * b) / s
    return np.exp(-q / 2) / (TWO_PI * np.sqrt(s))


# ---------------------------------------------------------------------------
# margins


def _mills(t):
    """``phi(t) / Phi(t)``, stable in the lower tail."""
    return np.exp(-0.5 * t * t - 0.5 * LOG_2PI - log_ndtr(t))


def _marginal_terms(y, u, cens, mu, eta):
    tau = np.exp(eta)
    z = (y[~cens] - mu) / tau
    t = (u[cens] - mu) / tau
    ll = log_ndtr(t).sum() - np.sum(eta + 0.5 * LOG_2PI + 0.5 * z * z)
    M = _mills(t)
    Mp = -M * (t + M)
    g = np.array([z.sum() / tau - M.sum() / tau,
                  np.sum(z * z - 1) - np.sum(M * t)])
    H = np.empty((2, 2))
    H[0, 0] = -z.size / tau ** 2 + np.sum(Mp) / tau ** 2
    H[0, 1] = H[1, 0] = -2 * z.sum() / tau + np.sum(Mp * t) / tau + np.sum(M) / tau
    H[1, 1] = -2 * np.sum(z * z) + np.sum(Mp * t * t) + np.sum(M * t)
    return ll, g, H


def marginal_loglik(y, u, mu, tau) -> float:
    y, u = np.asarray(y, dtype=float), np.broadcast_to(np.asarray(u, dtype=float), np.shape(y))
    cens = y <= u
    return float(_marginal_terms(y, u, cens, mu, np.log(tau))[0])


@dataclass
class MarginalFit:
    mu: float
    tau: float
    loglik: float
    iterations: int
    n_censored: int
    n_used: int


def fit_marginal_censored(y, u, fix_mu: bool = False, gtol: float = 1e-8,
                          maxiter: int = 100) -> MarginalFit:
    """Censored Gaussian MLE of ``(mu, tau)`` for one site.

    Values with ``y <= u`` are censored at ``u``; NaN values are dropped.
    Newton iteration in ``(mu, log tau)`` with step halving.
    """
    y = np.asarray(y, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), y.shape)
    keep = ~np.isnan(y)
    y, u = y[keep], u[keep]
    cens = y <= u
    nobs = int((~cens).sum())
    if nobs < MIN_UNCENSORED:
        raise CensoringError(f"only {nobs} uncensored values (need {MIN_UNCENSORED})")
    obs = y[~cens]
    mu = 0.0 if fix_mu else float(obs.mean())
    sd = float(np.sqrt(np.mean((obs - mu) ** 2)))
    if not sd > 0:
        raise CensoringError("uncensored values have zero spread")
    par = np.array([mu, np.log(sd)])
    free = np.array([not fix_mu, True])

    def terms(p):
        return _marginal_terms(y, u, cens, p[0], p[1])

    ll, g, H = terms(par)
    for it in range(1, maxiter + 1):
        gf = g[free]
        if np.max(np.abs(gf)) <= gtol:
            break
        Hf = H[np.ix_(free, free)]
        try:
            np.linalg.cholesky(-Hf)
            step = np.linalg.solve(-Hf, gf)
        except np.linalg.LinAlgError:
            step = gf / max(np.abs(np.diag(Hf)).max(), 1.0)
        full = np.zeros(2)
        full[free] = step
        t = 1.0
        for _ in range(50):
            trial = par + t * full
            tl = terms(trial)
            if np.isfinite(tl[0]) and tl[0] >= ll:
                break
            t *= 0.5
        else:
            break
        gain = tl[0] - ll
        par = trial
        ll, g, H = tl
        # objective flat to rounding: the gradient is as small as it can get
        if gain <= 1e-15 * (1 + abs(ll)) and np.max(np.abs(g[free])) <= 1e3 * gtol:
            break
    else:
        raise CensoringError(f"marginal fit did not converge in {maxiter} iterations")
    return MarginalFit(float(par[0]), float(np.exp(par[1])), float(ll), it,
                       int(cens.sum()), int(y.size))


# ---------------------------------------------------------------------------
# pairs


def _pair_terms(w, v, cw, cv, rho):
    """Pairwise log-likelihood and its first two derivatives in ``rho``.

    ``w`` and ``v`` hold standardized values where observed and the
    standardized bounds where censored.
    """
    s = 1 - rho * rho
    ll = 0.0
    d1 = 0.0
    d2 = 0.0
    both = ~cw & ~cv
    if both.any():
        a, b = w[both], v[both]
        ab = a * b
        Q = a * a - 2 * rho * ab + b * b
        ll += np.sum(-LOG_2PI - 0.5 * np.log(s) - Q / (2 * s))
        d1 += np.sum(rho / s + ab / s - Q * rho / s ** 2)
        d2 += np.sum((1 + rho * rho + 4 * ab * rho - Q) / s ** 2 - 4 * Q * rho * rho / s ** 3)
    for cx, xv, ov in ((cw & ~cv, w, v), (~cw & cv, v, w)):
        if not cx.any():
            continue
        uu, b = xv[cx], ov[cx]
        rs = np.sqrt(s)
        t = (uu - rho * b) / rs
        t1 = (rho * uu - b) / s ** 1.5
        t2 = uu / s ** 1.5 + 3 * rho * (rho * uu - b) / s ** 2.5
        M = _mills(t)
        Mp = -M * (t + M)
        ll += np.sum(-0.5 * LOG_2PI - 0.5 * b * b + log_ndtr(t))
        d1 += np.sum(M * t1)
        d2 += np.sum(Mp * t1 * t1 + M * t2)
    cc = cw & cv
    if cc.any():
        a, b = w[cc], v[cc]
        P = np.maximum(bvn_cdf(a, b, rho), 1e-300)
        f = bvn_pdf(a, b, rho)
        ab = a * b
        Q = a * a - 2 * rho * ab + b * b
        # near |rho| = 1 the density underflows while dlogf overflows
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            dlogf = rho / s + ab / s - Q * rho / s ** 2
            curv = np.where(f > 0, f / P * dlogf, 0.0)
        ratio = f / P
        ll += np.sum(np.log(P))
        d1 += np.sum(ratio)
        d2 += np.sum(curv - ratio * ratio)
    return float(ll), float(d1), float(d2)


def pairwise_loglik(w, wprime, u, uprime, rho) -> float:
    w, v, cw, cv = _pair_inputs(w, wprime, u, uprime)
    return _pair_terms(w, v, cw, cv, rho)[0]


def _pair_inputs(w, wprime, u, uprime):
    w = np.asarray(w, dtype=float)
    wp = np.asarray(wprime, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), w.shape)
    up = np.broadcast_to(np.asarray(uprime, dtype=float), wp.shape)
    keep = ~(np.isnan(w) | np.isnan(wp))
    w, wp, u, up = w[keep], wp[keep], u[keep], up[keep]
    cw = w <= u
    cv = wp <= up
    return np.where(cw, u, w), np.where(cv, up, wp), cw, cv


@dataclass
class PairFit:
    rho: float
    loglik: float
    grad: float
    iterations: int
    n_used: int


def fit_pairwise_rho(w, wprime, u, uprime, gtol: float = 1e-10,
                     maxiter: int = 100) -> PairFit:
    """Maximum pairwise censored likelihood correlation of two standardized series.

    Newton iteration on ``z = atanh(rho)`` with step halving; falls back to
    a gradient step when the curvature is not negative. Rows missing in
    either series are dropped.
    """
    w, v, cw, cv = _pair_inputs(w, wprime, u, uprime)
    n = w.size
    if n < MIN_UNCENSORED:
        raise CensoringError(f"only {n} rows usable for the pair (need {MIN_UNCENSORED})")
    obs = ~cw & ~cv
    if obs.sum() >= 3 and np.std(w[obs]) > 0 and np.std(v[obs]) > 0:
        r0 = float(np.corrcoef(w[obs], v[obs])[0, 1])
    else:
        r0 = 0.0
    z = float(np.arctanh(np.clip(r0, -0.95, 0.95)))

    def terms(z):
        rho = np.tanh(z)
        s = 1 - rho * rho
        # trial points with |rho| rounding to 1 give non-finite values the
        # line search rejects
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            ll, d1, d2 = _pair_terms(w, v, cw, cv, rho)
        return ll, d1 * s, d2 * s * s - 2 * rho * s * d1

    ll, g, h = terms(z)
    it = 0
    for it in range(1, maxiter + 1):
        if abs(g) <= gtol * (1 + abs(ll)):
            break
        step = -g / h if h < 0 else g / max(abs(h), 1.0) + np.sign(g) * 0.1
        step = float(np.clip(step, -2.0, 2.0))
        t = 1.0
        for _ in range(60):
            cand = z + t * step
            tl = terms(cand)
            if np.isfinite(tl[0]) and tl[0] >= ll:
                break
            t *= 0.5
        else:
            break
        if cand == z:
            break
        z = cand
        ll, g, h = tl
        # rho saturates at +-1 in double precision beyond this
        if abs(z) > 18:
            break
    return PairFit(float(np.tanh(z)), float(ll), float(g), it, int(n))


# ---------------------------------------------------------------------------
# matrices


@dataclass
class CensoredMatrix:
    """Observations ``X`` (``n x m``, NaN = missing) with left-censoring bounds ``L``.

    ``L`` may be a scalar, a length-``m`` row or a full ``n x m`` matrix.
    """

    X: np.ndarray
    L: np.ndarray
    names: Optional[Sequence[str]] = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise CensoringError("observations must be an n x m matrix")
        try:
            L = np.broadcast_to(np.asarray(self.L, dtype=float), X.shape).copy()
        except ValueError as err:
            raise CensoringError(f"bounds of shape {np.shape(self.L)} do not match "
                                 f"observations {X.shape}") from err
        if np.any(np.isnan(L)):
            raise CensoringError("censoring bounds must not be NaN")
        if np.any(np.isinf(X)):
            raise CensoringError("observations must be finite or missing")
        self.X, self.L = X, L
        if self.names is None:
            self.names = [f"V{j + 1}" for j in range(X.shape[1])]
        if len(self.names) != X.shape[1]:
            raise CensoringError("names do not match number of columns")
        for j in range(X.shape[1]):
            col = X[:, j]
            ok = ~np.isnan(col) & (col > L[:, j])
            if ok.sum() < MIN_UNCENSORED:
                raise CensoringError(
                    f"column {j} ({self.names[j]}) has {int(ok.sum())} uncensored values; "
                    f"need {MIN_UNCENSORED}", (j,))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @property
    def censored(self) -> np.ndarray:
        return ~np.isnan(self.X) & (self.X <= self.L)

    def effective_n(self) -> int:
        """Rows times the observed (non-missing) fraction, rounded."""
        return int(round(self.n * np.mean(~np.isnan(self.X))))


@dataclass
class CensoredFit:
    mu: np.ndarray
    tau: np.ndarray
    R: np.ndarray
    Sigma: np.ndarray
    psd_repaired: bool = False
    min_eigenvalue: float = np.nan


def repair_correlation(R, floor: float = 1e-8):
    """Clip eigenvalues at ``floor`` and rescale to unit diagonal."""
    ev, Q = np.linalg.eigh(R)
    A = (Q * np.maximum(ev, floor)) @ Q.T
    d = np.sqrt(np.diag(A))
    A = A / np.outer(d, d)
    A = 0.5 * (A + A.T)
    np.fill_diagonal(A, 1.0)
    return A


def fitcenmvn(data: CensoredMatrix, scale: bool = True, psd_repair: bool = False) -> CensoredFit:
    """Margins then all pairwise correlations of a censored data matrix.

    With ``scale`` margins get free means; otherwise means are fixed at
    zero and series are standardized by ``tau`` only.
    """
    m = data.m
    mu = np.zeros(m)
    tau = np.zeros(m)
    for j in range(m):
        try:
            mf = fit_marginal_censored(data.X[:, j], data.L[:, j], fix_mu=not scale)
        except CensoringError as err:
            raise CensoringError(f"column {j} ({data.names[j]}): {err}", (j,)) from err
        mu[j], tau[j] = mf.mu, mf.tau
    W = (data.X - mu) / tau
    U = (data.L - mu) / tau
    R = np.eye(m)
    for i in range(m):
        for j in range(i + 1, m):
            try:
                pf = fit_pairwise_rho(W[:, i], W[:, j], U[:, i], U[:, j])
            except CensoringError as err:
                raise CensoringError(f"columns {i}, {j} ({data.names[i]}, {data.names[j]}): "
                                     f"{err}", (i, j)) from err
            R[i, j] = R[j, i] = pf.rho
    min_ev = float(np.linalg.eigvalsh(R).min())
    repaired = False
    if psd_repair and min_ev < 0:
        R = repair_correlation(R)
        repaired = True
    Sigma = R * np.outer(tau, tau)
    return CensoredFit(mu, tau, R, 0.5 * (Sigma + Sigma.T), repaired, min_ev)


def cencor(data: CensoredMatrix, scale: bool = True, psd_repair: bool = False) -> np.ndarray:
    return fitcenmvn(data, scale, psd_repair).R


def cencov(data: CensoredMatrix, scale: bool = True, psd_repair: bool = False) -> np.ndarray:
    return fitcenmvn(data, scale, psd_repair).Sigma
