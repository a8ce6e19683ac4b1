"""Prediction, simulation and variogram diagnostics for fitted models."""

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import Delaunay

from .fit import FittedModel, coefficient_uncertainty
from .gplik import SampleCov, build_sigma, powexp_corr

__all__ = [
    "PredictionResult",
    "VariogramData",
    "CovarianceError",
    "predict_dspace",
    "predict_vcov",
    "pivoted_cholesky",
    "simulate_gp",
    "variogram_data",
]


class CovarianceError(np.linalg.LinAlgError):
    pass


class ExtrapolationWarning(UserWarning):
    pass


@dataclass
class PredictionResult:
    """D-space coordinates with optional pointwise standard errors."""

    fitted: np.ndarray
    se: Optional[np.ndarray] = None
    outside: Optional[np.ndarray] = None


@dataclass
class VariogramData:
    """Pairwise empirical semivariances and a sampled model curve.

    Attributes
    ----------
    i, j : ndarray
        Site indices with ``i < j``.
    distance : ndarray
        D-space distances between the pair's mapped sites.
    semivariance : ndarray
        ``(V_ii + V_jj) / 2 - V_ij``.
    curve_d, curve_gamma : ndarray
        Model semivariance ``sigma2 * (1 - rho(d))`` on a regular grid.
    """

    i: np.ndarray
    j: np.ndarray
    distance: np.ndarray
    semivariance: np.ndarray
    curve_d: np.ndarray
    curve_gamma: np.ndarray

    def model_at(self, d, model: FittedModel):
        return model_semivariance(d, model)

    def msd(self, model: FittedModel) -> float:
        """Mean squared deviation of the points from the model curve."""
        return float(np.mean((self.semivariance - model_semivariance(self.distance, model)) ** 2))


def _site_coords(model: FittedModel, newcoords):
    if newcoords is None:
        return model.anchors, False
    x = np.atleast_2d(np.asarray(newcoords, dtype=float))
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"new coordinates must be q x 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("new coordinates must be finite")
    std = model.standardization
    if std:
        x = (x - np.asarray(std["center"])) / float(std["scale"])
    return x, True


def outside_hull(model: FittedModel, x) -> np.ndarray:
    """True where ``x`` (model coordinates) lies outside the convex hull of the sites."""
    tri = Delaunay(model.anchors)
    return tri.find_simplex(x) < 0


def predict_dspace(model: FittedModel, newcoords=None, with_se: bool = False) -> PredictionResult:
    """Map G-space coordinates to D-space.

    Standard errors use the delta method ``se^2 = J' H^{-1} J``, with ``J``
    the gradient of an output coordinate with respect to the warp
    coefficients.
    """
    x, new = _site_coords(model, newcoords)
    fitted = model.warp.transform(x, model.beta_warp)
    outside = None
    if new:
        outside = outside_hull(model, x)
        if outside.any():
            warnings.warn(f"{int(outside.sum())} of {len(x)} points lie outside the "
                          "convex hull of the fitting sites", ExtrapolationWarning, stacklevel=2)
    se = None
    if with_se:
        C = coefficient_uncertainty(model)
        pw = model.warp.n_coef
        Cw = C[:pw, :pw]
        J = model.warp.jacobian(x, model.beta_warp)
        var = np.einsum("qdi,ij,qdj->qd", J, Cw, J)
        se = np.sqrt(np.clip(var, 0, None))
    return PredictionResult(fitted, se, outside)


def predict_vcov(model: FittedModel, newcoords=None) -> np.ndarray:
    """Model covariance among mapped sites (the fit sites by default)."""
    x, _ = _site_coords(model, newcoords)
    return build_sigma(model.warp.transform(x, model.beta_warp), model.cov_params)


def pivoted_cholesky(A, tol: float = 1e-10, neg_tol: float = 1e-8):
    """Diagonally pivoted Cholesky factor of a positive semidefinite matrix.

    Returns ``L`` and ``perm`` with ``A[perm][:, perm] = L @ L.T``. The
    factorization stops once the largest remaining pivot falls below
    ``tol * max(diag(A))``; the trailing block of ``L`` is left at zero.

    Raises
    ------
    CovarianceError
        If a pivot is below ``-neg_tol * max(diag(A))``.
    """
    A = np.array(A, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ValueError("matrix must be square")
    perm = np.arange(n)
    L = np.zeros((n, n))
    dmax = max(np.max(np.diag(A), initial=0.0), 0.0)
    d = np.diag(A).copy()
    for j in range(n):
        p = j + int(np.argmax(d[j:]))
        if d[p] < -neg_tol * max(dmax, 1e-300):
            raise CovarianceError(f"covariance has negative pivot {d[p]:.3g} at step {j}")
        if d[p] <= tol * dmax or dmax == 0:
            break
        if p != j:
            perm[[j, p]] = perm[[p, j]]
            d[[j, p]] = d[[p, j]]
            L[[j, p], :j] = L[[p, j], :j]
        piv = np.sqrt(d[j])
        L[j, j] = piv
        col = A[perm[j + 1:], perm[j]] - L[j + 1:, :j] @ L[j, :j]
        L[j + 1:, j] = col / piv
        d[j + 1:] -= L[j + 1:, j] ** 2
    return L, perm


def sample_mvn(Sigma, nsim: int, seed=None) -> np.ndarray:
    """``q x nsim`` zero-mean normal draws with covariance ``Sigma``."""
    if nsim < 1:
        raise ValueError("nsim must be at least 1")
    L, perm = pivoted_cholesky(Sigma)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((L.shape[0], nsim))
    out = np.empty_like(Z)
    out[perm] = L @ Z
    return out


def simulate_gp(model: FittedModel, nsim: int = 1, newcoords=None, seed=None) -> np.ndarray:
    """Unconditional realizations of the fitted process, shape ``(q, nsim)``."""
    return sample_mvn(predict_vcov(model, newcoords), nsim, seed)


def model_semivariance(d, model: FittedModel) -> np.ndarray:
    p = model.cov_params
    return p.sigma2 * (1 - powexp_corr(np.asarray(d, dtype=float), p))


def variogram_data(model: FittedModel, sample: SampleCov, n_curve: int = 200) -> VariogramData:
    """Empirical pairwise semivariances against D-space distance, plus the model curve."""
    V = sample.V
    m = V.shape[0]
    if m != model.anchors.shape[0]:
        raise ValueError(f"sample has {m} sites, model has {model.anchors.shape[0]}")
    i, j = np.triu_indices(m, 1)
    X = model.dspace()
    dist = np.sqrt(((X[i] - X[j]) ** 2).sum(axis=1))
    semi = 0.5 * (V[i, i] + V[j, j]) - V[i, j]
    dmax = dist.max() if dist.size else 1.0
    grid = np.linspace(0.0, 1.05 * dmax, n_curve)
    return VariogramData(i, j, dist, semi, grid, model_semivariance(grid, model))
