"""Coordinate mappings from G-space to D-space and the fold penalty.

Three mapping kinds are supported:

``aniso``
    ``(x1, x2) -> (a1 x1, a2 x2)`` with ``a1, a2 > 0`` held as logs.
``deform``
    Two thin plate regression splines with a symmetric affine part,
    ``g1 = exp(a1) x1 + a3 x2 + s1(x)`` and ``g2 = a3 x1 + exp(a2) x2 + s2(x)``,
    the radial parts constrained orthogonal to affine functions.
``expand``
    The affine pair above followed by ``r`` unconstrained radial surfaces.

All maps are linear in the spline coefficients; the only nonlinearity is
the exponential on the two diagonal scale terms.
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import sparse

from .splinebasis import AnchorSet, WarpBasis, build_basis, eta, pairwise_distance

__all__ = [
    "WarpSpec",
    "WarpCoefficients",
    "FoldConfig",
    "Tiling",
    "Warp",
    "BijectivityReport",
    "FoldPenalty",
    "aniso_map",
    "deform_map",
    "expand_map",
    "clockwise_area",
    "build_tiling",
    "fold_penalty",
    "is_bijective",
    "triangle_areas",
]

KINDS = ("aniso", "deform", "expand")


class WarpError(ValueError):
    pass


@dataclass(frozen=True)
class FoldConfig:
    """Controls for the bijectivity penalty.

    ``delta_weight`` multiplies the squared sum of negative scaled areas and
    ``scale`` multiplies the reference area ``a1 * a2 * l1 * l2`` taken from
    an anisotropic fit to give ``epsilon``.
    """

    delta_weight: float = 1e3
    scale: float = 1.0
    nx: int = 40
    ny: int = 40
    epsilon: Optional[float] = None

    def __post_init__(self):
        if not self.delta_weight > 0:
            raise WarpError("fold penalty weight must be positive")
        if not self.scale > 0:
            raise WarpError("fold area scale must be positive")
        if self.nx < 2 or self.ny < 2:
            raise WarpError("tiling needs nx, ny >= 2")
        if self.epsilon is not None and not self.epsilon > 0:
            raise WarpError("epsilon must be positive")

    def with_epsilon(self, alpha1: float, alpha2: float, tiling: "Tiling") -> "FoldConfig":
        eps = self.scale * alpha1 * alpha2 * tiling.l1 * tiling.l2
        return FoldConfig(self.delta_weight, self.scale, self.nx, self.ny, float(eps))


@dataclass(frozen=True)
class WarpSpec:
    kind: str
    ranks: Tuple[int, ...] = ()
    bijective: bool = False
    fold: Optional[FoldConfig] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise WarpError(f"unknown warp kind {self.kind!r}")
        ranks = tuple(int(k) for k in self.ranks)
        object.__setattr__(self, "ranks", ranks)
        if self.kind == "aniso":
            if ranks:
                raise WarpError("aniso warp takes no ranks")
        else:
            if not ranks:
                raise WarpError(f"{self.kind} warp needs ranks")
            if self.kind == "deform" and len(ranks) != 2:
                raise WarpError("deform warp needs exactly two ranks")
            if min(ranks) < 4:
                raise WarpError("every rank must be at least 4")
        if self.bijective and self.kind != "deform":
            raise WarpError("bijective applies to deform warps only")
        if self.bijective and self.fold is None:
            object.__setattr__(self, "fold", FoldConfig())

    @property
    def n_latent(self) -> int:
        return len(self.ranks) if self.kind == "expand" else 0

    @property
    def out_dim(self) -> int:
        return 2 + self.n_latent


@dataclass
class WarpCoefficients:
    """Structured view of a warp coefficient vector.

    For ``aniso`` only ``alpha[:2]`` is used and holds log scales.
    """

    alpha: np.ndarray
    deltas: Tuple[np.ndarray, ...] = ()

    def to_vector(self, kind: str = "deform") -> np.ndarray:
        alpha = np.asarray(self.alpha, dtype=float)
        if kind == "aniso":
            return alpha[:2].copy()
        return np.concatenate([alpha[:3]] + [np.asarray(d, dtype=float) for d in self.deltas])

    @classmethod
    def from_vector(cls, beta, kind: str, sizes: Sequence[int] = ()) -> "WarpCoefficients":
        beta = np.asarray(beta, dtype=float)
        if kind == "aniso":
            return cls(beta[:2].copy())
        out, pos = [], 3
        for s in sizes:
            out.append(beta[pos:pos + s].copy())
            pos += s
        if pos != beta.size:
            raise WarpError(f"coefficient length {beta.size} does not match sizes {tuple(sizes)}")
        return cls(beta[:3].copy(), tuple(out))


class Warp:
    """A warp of given kind over fixed anchors.

    Evaluates D-space coordinates and their first and second derivatives
    with respect to the warp coefficient vector.
    """

    def __init__(self, spec: WarpSpec, anchors, bases: Optional[Sequence[WarpBasis]] = None):
        self.spec = spec
        self.anchors = anchors if isinstance(anchors, AnchorSet) else AnchorSet(anchors)
        m = self.anchors.m
        if bases is None:
            bases = [build_basis(self.anchors, k, constrained=spec.kind == "deform")
                     for k in spec.ranks]
        self.bases = tuple(bases)
        for k in spec.ranks:
            if k > m:
                raise WarpError(f"rank {k} exceeds number of sites {m}")
        self.sizes = tuple(b.n_coef for b in self.bases)
        self.n_coef = 2 if spec.kind == "aniso" else 3 + sum(self.sizes)
        self._site_design = self.designs(self.anchors.coords)

    @property
    def out_dim(self) -> int:
        return self.spec.out_dim

    def designs(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.bases:
            return ()
        # one eta evaluation shared by all smooths
        R = eta(pairwise_distance(x, self.anchors.coords))
        return tuple(R @ b.coef_map for b in self.bases)

    def _designs_for(self, x, designs):
        if designs is not None:
            return designs
        if x is self.anchors.coords:
            return self._site_design
        return self.designs(x)

    def transform(self, x, beta, designs=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != 2:
            raise WarpError(f"expected N x 2 coordinates, got {x.shape}")
        beta = np.asarray(beta, dtype=float)
        if beta.size != self.n_coef:
            raise WarpError(f"expected {self.n_coef} warp coefficients, got {beta.size}")
        kind = self.spec.kind
        if kind == "aniso":
            return x * np.exp(beta[:2])
        D = self._designs_for(x, designs)
        out = np.empty((x.shape[0], self.out_dim))
        a1, a2, a3 = beta[:3]
        out[:, 0] = np.exp(a1) * x[:, 0] + a3 * x[:, 1]
        out[:, 1] = a3 * x[:, 0] + np.exp(a2) * x[:, 1]
        pos = 3
        for d, (Dd, s) in enumerate(zip(D, self.sizes)):
            coef = beta[pos:pos + s]
            if kind == "deform":
                out[:, d] += Dd @ coef
            else:
                out[:, 2 + d] = Dd @ coef
            pos += s
        return out

    def jacobian(self, x, beta, designs=None) -> np.ndarray:
        """Derivatives of mapped coordinates, shape ``(N, out_dim, n_coef)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        beta = np.asarray(beta, dtype=float)
        N = x.shape[0]
        J = np.zeros((N, self.out_dim, self.n_coef))
        if self.spec.kind == "aniso":
            e = np.exp(beta[:2])
            J[:, 0, 0] = e[0] * x[:, 0]
            J[:, 1, 1] = e[1] * x[:, 1]
            return J
        D = self._designs_for(x, designs)
        J[:, 0, 0] = np.exp(beta[0]) * x[:, 0]
        J[:, 1, 1] = np.exp(beta[1]) * x[:, 1]
        J[:, 0, 2] = x[:, 1]
        J[:, 1, 2] = x[:, 0]
        pos = 3
        for d, (Dd, s) in enumerate(zip(D, self.sizes)):
            row = d if self.spec.kind == "deform" else 2 + d
            J[:, row, pos:pos + s] = Dd
            pos += s
        return J

    def curvature(self, x, beta) -> np.ndarray:
        """Nonzero second derivatives, shape ``(N, 2)``.

        Column ``c`` is the second derivative of output ``c`` with respect
        to coefficient ``c`` twice; every other second derivative is zero.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x * np.exp(np.asarray(beta, dtype=float)[:2])

    def identity_coefficients(self) -> np.ndarray:
        return np.zeros(self.n_coef)


def aniso_map(x, alpha):
    """Axis-aligned scaling ``(a1 x1, a2 x2)`` for positive ``alpha``."""
    x = np.asarray(x, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise WarpError("anisotropic scales must be positive")
    return x * alpha


def _smooth_map(kind, x, coef, bases):
    if not isinstance(coef, WarpCoefficients):
        raise WarpError("coef must be WarpCoefficients")
    bases = tuple(bases)
    if len(coef.deltas) != len(bases):
        raise WarpError(f"{len(coef.deltas)} coefficient blocks for {len(bases)} smooths")
    for d, b in zip(coef.deltas, bases):
        if np.asarray(d).size != b.n_coef:
            raise WarpError(f"smooth of rank {b.k} needs {b.n_coef} coefficients, got {np.asarray(d).size}")
    spec = WarpSpec(kind, tuple(b.k for b in bases))
    w = Warp(spec, bases[0].anchors, bases)
    x = np.asarray(x, dtype=float)
    out = w.transform(np.atleast_2d(x), coef.to_vector(kind))
    return out[0] if x.ndim == 1 else out


def deform_map(x, coef: WarpCoefficients, bases: Sequence[WarpBasis]):
    """Thin plate deformation of ``x`` (a 2-vector or N x 2 array)."""
    return _smooth_map("deform", x, coef, bases)


def expand_map(x, coef: WarpCoefficients, bases: Sequence[WarpBasis]):
    """Dimension expansion of ``x`` into ``2 + r`` coordinates."""
    return _smooth_map("expand", x, coef, bases)


# ---------------------------------------------------------------------------
# triangles


def clockwise_area(p1, p2, p3):
    """Signed area, positive when ``p1, p2, p3`` run clockwise."""
    p1, p2, p3 = (np.asarray(p, dtype=float) for p in (p1, p2, p3))
    x11, x12 = p1[..., 0], p1[..., 1]
    x21, x22 = p2[..., 0], p2[..., 1]
    x31, x32 = p3[..., 0], p3[..., 1]
    area = (x21 * x12 + x31 * x22 + x11 * x32 - x11 * x22 - x21 * x32 - x31 * x12) / 2
    return float(area) if np.ndim(area) == 0 else area


@dataclass(frozen=True)
class Tiling:
    vertices: np.ndarray
    triangles: np.ndarray
    l1: float
    l2: float
    nx: int
    ny: int

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]


def build_tiling(bbox, nx: int, ny: int) -> Tiling:
    """Regular ``nx`` by ``ny`` vertex grid over ``bbox``, two clockwise triangles per cell.

    ``bbox`` is ``[[xmin, xmax], [ymin, ymax]]``.
    """
    bbox = np.asarray(bbox, dtype=float)
    (x0, x1), (y0, y1) = bbox
    if nx < 2 or ny < 2:
        raise WarpError("tiling needs nx, ny >= 2")
    if not (x1 > x0 and y1 > y0):
        raise WarpError(f"degenerate bounding box {bbox.tolist()}")
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    vertices = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    ll, lr = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    ul, ur = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    # lower-left -> upper-left -> lower-right and upper-right -> lower-right -> upper-left
    tri = np.concatenate([np.column_stack([ll, ul, lr]), np.column_stack([ur, lr, ul])])
    return Tiling(vertices, tri, (x1 - x0) / (nx - 1), (y1 - y0) / (ny - 1), int(nx), int(ny))


def triangle_areas(points, triangles):
    p = points[triangles]
    return clockwise_area(p[:, 0], p[:, 1], p[:, 2])


@dataclass(frozen=True)
class BijectivityReport:
    bijective: bool
    n_negative: int
    n_triangles: int
    flipped: bool

    def __str__(self):
        s = f"bijective: {str(self.bijective).lower()} ({self.n_negative} negative triangles of {self.n_triangles})"
        if self.flipped:
            s += " [flipped: all areas negative]"
        return s


def is_bijective(beta, warp: Warp, tiling: Tiling) -> BijectivityReport:
    """Orientation check of the mapped tiling.

    A mix of signs means the map folds; all negative means it is a
    reflection of a fold-free map and is reported as flipped.
    """
    if warp.spec.kind != "deform":
        raise WarpError("bijectivity check applies to deform warps")
    mapped = warp.transform(tiling.vertices, beta)
    areas = triangle_areas(mapped, tiling.triangles)
    neg = int(np.sum(areas < 0))
    L = tiling.n_triangles
    flipped = neg == L
    return BijectivityReport(neg == 0 and bool(np.all(areas > 0)), neg, L, flipped)


# (row, col, sign) entries of twice the clockwise area as a bilinear form a' C b
_AREA_FORM = ((1, 0, 1.0), (2, 1, 1.0), (0, 2, 1.0), (0, 1, -1.0), (1, 2, -1.0), (2, 0, -1.0))


class FoldPenalty:
    """``(delta/2) * (sum_l min(A_l / eps, 0))**2`` over a mapped tiling.

    Precomputes the spline design at the tiling vertices so that repeated
    evaluation during fitting only costs two matrix products.
    """

    def __init__(self, warp: Warp, tiling: Tiling, cfg: FoldConfig):
        if warp.spec.kind != "deform":
            raise WarpError("fold penalty applies to deform warps")
        if cfg.epsilon is None:
            raise WarpError("FoldConfig.epsilon must be set before evaluating the penalty")
        self.warp = warp
        self.tiling = tiling
        self.cfg = cfg
        self._designs = warp.designs(tiling.vertices)

    def areas(self, beta):
        mapped = self.warp.transform(self.tiling.vertices, beta, self._designs)
        return triangle_areas(mapped, self.tiling.triangles)

    def value(self, beta) -> float:
        A = self.areas(beta) / self.cfg.epsilon
        s = np.minimum(A, 0.0).sum()
        return 0.5 * self.cfg.delta_weight * s * s

    def __call__(self, beta, derivs: bool = True):
        """Return ``(value, gradient, hessian)`` in the warp coefficients."""
        beta = np.asarray(beta, dtype=float)
        tl = self.tiling
        eps = self.cfg.epsilon
        mapped = self.warp.transform(tl.vertices, beta, self._designs)
        tri = tl.triangles
        areas = triangle_areas(mapped, tri)
        active = areas < 0
        s = areas[active].sum() / eps
        val = 0.5 * self.cfg.delta_weight * s * s
        p = beta.size
        if not derivs:
            return val, None, None
        if not active.any():
            return val, np.zeros(p), np.zeros((p, p))
        J = self.warp.jacobian(tl.vertices, beta, self._designs)
        Ja, Jb = J[:, 0, :], J[:, 1, :]
        a, b = mapped[:, 0], mapped[:, 1]
        V = tl.vertices.shape[0]
        t = tri[active]
        rows = np.concatenate([t[:, r] for r, _, _ in _AREA_FORM])
        cols = np.concatenate([t[:, c] for _, c, _ in _AREA_FORM])
        vals = np.concatenate([np.full(t.shape[0], sg) for _, _, sg in _AREA_FORM])
        M = sparse.csr_matrix((vals, (rows, cols)), shape=(V, V))
        # sum of active areas = a' M b / 2
        ga = 0.5 * (M @ b)
        gb = 0.5 * (M.T @ a)
        grad_s = (Ja.T @ ga + Jb.T @ gb) / eps
        cross = 0.5 * (Ja.T @ (M @ Jb))
        hess_s = (cross + cross.T) / eps
        curv = self.warp.curvature(tl.vertices, beta)
        hess_s[0, 0] += ga @ curv[:, 0] / eps
        hess_s[1, 1] += gb @ curv[:, 1] / eps
        dw = self.cfg.delta_weight
        grad = dw * s * grad_s
        hess = dw * (np.outer(grad_s, grad_s) + s * hess_s)
        return val, grad, hess


def fold_penalty(beta, warp: Warp, tiling: Tiling, cfg: FoldConfig):
    """Functional form of :class:`FoldPenalty`; returns ``(value, grad, hess)``."""
    return FoldPenalty(warp, tiling, cfg)(beta)
