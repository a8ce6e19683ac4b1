"""Truncated thin plate eigenbases and their quadratic penalties.

A thin plate spline over anchors ``x_1, ..., x_m`` has radial part
``sum_i delta_i * eta(|x - x_i|)`` with ``eta(l) = l**2 log l``. The
regression-spline version restricts ``delta`` to the span of the ``k``
leading eigenvectors of ``E_ij = eta(|x_i - x_j|)``, which keeps the
parameter count fixed as the number of anchors grows.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "AnchorSet",
    "WarpBasis",
    "PenaltyBlock",
    "PenaltyLayout",
    "eta",
    "build_E",
    "truncate_basis",
    "constraint_nullspace",
    "build_basis",
    "build_penalties",
]


class BasisError(ValueError):
    """Invalid anchors, ranks, or degenerate constraint geometry."""


def eta(l):
    """Thin plate radial function ``l**2 * log(l)``, with ``eta(0) = 0``.

    Parameters
    ----------
    l : float or ndarray
        Nonnegative distances.

    Returns
    -------
    float or ndarray
    """
    arr = np.asarray(l, dtype=float)
    if np.any(arr < 0):
        raise BasisError("eta is defined for nonnegative distances only")
    out = np.zeros_like(arr)
    pos = arr > 0
    out[pos] = arr[pos] ** 2 * np.log(arr[pos])
    if out.ndim == 0:
        return float(out)
    return out


def pairwise_distance(a, b):
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass(frozen=True)
class AnchorSet:
    """Site coordinates in G-space acting as spline knots."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise BasisError(f"anchors must be an m x 2 array, got shape {coords.shape}")
        if coords.shape[0] < 4:
            raise BasisError(f"need at least 4 anchors, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise BasisError("anchor coordinates must be finite")
        _, counts = np.unique(coords, axis=0, return_counts=True)
        if np.any(counts > 1):
            dup = np.unique(coords, axis=0)[counts > 1][0]
            raise BasisError(f"duplicate anchor coordinates {tuple(dup)}")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def m(self) -> int:
        return self.coords.shape[0]

    @property
    def T(self) -> np.ndarray:
        """The m x 3 matrix with rows ``(1, x_i1, x_i2)``."""
        return np.column_stack([np.ones(self.m), self.coords])


def build_E(anchors) -> np.ndarray:
    """Radial basis matrix ``E_ij = eta(|x_i - x_j|)``.

    Duplicate anchors raise, since a zero off-diagonal distance means the
    design is degenerate.
    """
    if not isinstance(anchors, AnchorSet):
        anchors = AnchorSet(anchors)
    x = anchors.coords
    E = eta(pairwise_distance(x, x))
    # exact symmetry regardless of rounding in the distance sum
    return 0.5 * (E + E.T)


def _fix_signs(U):
    U = U.copy()
    for j in range(U.shape[1]):
        nz = np.flatnonzero(np.abs(U[:, j]) > 1e-14)
        if nz.size and U[nz[0], j] < 0:
            U[:, j] = -U[:, j]
    return U


def truncate_basis(E, k) -> Tuple[np.ndarray, np.ndarray]:
    """Rank-``k`` eigen-truncation of ``E`` by eigenvalue magnitude.

    Parameters
    ----------
    E : ndarray, shape (m, m)
        Symmetric radial basis matrix.
    k : int
        Retained rank, ``4 <= k <= m``.

    Returns
    -------
    U_k : ndarray, shape (m, k)
        Orthonormal eigenvectors, first nonzero entry of each positive.
    Lambda_k : ndarray, shape (k,)
        Eigenvalues in descending order of magnitude.
    """
    E = np.asarray(E, dtype=float)
    m = E.shape[0]
    k = int(k)
    if k < 4 or k > m:
        raise BasisError(f"rank k={k} outside [4, {m}]")
    evals, evecs = np.linalg.eigh(E)
    # stable sort on -|e| keeps ties in eigh's ascending order
    order = np.argsort(-np.abs(evals), kind="stable")[:k]
    return _fix_signs(evecs[:, order]), evals[order].copy()


def constraint_nullspace(T, U_k) -> np.ndarray:
    """Orthonormal ``Z_k`` with ``T' U_k Z_k = 0``.

    Taken as the trailing ``k - 3`` columns of the complete QR factor of
    ``U_k' T``.
    """
    T = np.asarray(T, dtype=float)
    U_k = np.asarray(U_k, dtype=float)
    C = U_k.T @ T  # k x 3
    k = C.shape[0]
    Q, R = np.linalg.qr(C, mode="complete")
    diag = np.abs(np.diag(R[:3, :3]))
    scale = max(np.abs(C).max(), 1.0)
    if diag.min() <= 1e-10 * scale:
        raise BasisError(
            "T'U_k is rank deficient (smallest |R_ii| = %.3g); anchors may be "
            "collinear or k too small to carry the affine constraint" % diag.min()
        )
    return Q[:, 3:k].copy()


@dataclass(frozen=True)
class WarpBasis:
    """One truncated smooth: eigenbasis plus optional constraint null space.

    ``Z_k`` is present for deformation smooths, where the affine part is
    carried separately and ``T' delta = 0`` is imposed.
    """

    anchors: AnchorSet
    E: np.ndarray
    U_k: np.ndarray
    Lambda_k: np.ndarray
    Z_k: Optional[np.ndarray]
    k: int

    @property
    def T(self):
        return self.anchors.T

    @property
    def n_coef(self) -> int:
        return self.k - 3 if self.Z_k is not None else self.k

    @property
    def coef_map(self) -> np.ndarray:
        """Matrix taking reduced coefficients to the full ``delta`` (m-vector)."""
        if self.Z_k is None:
            return self.U_k
        return self.U_k @ self.Z_k

    def penalty_block(self, absolute: bool = False) -> np.ndarray:
        lam = np.abs(self.Lambda_k) if absolute else self.Lambda_k
        if self.Z_k is None:
            return np.diag(lam)
        S = self.Z_k.T @ (lam[:, None] * self.Z_k)
        return 0.5 * (S + S.T)

    def design(self, x) -> np.ndarray:
        """Rows ``eta(|x - x_i|)`` against all anchors, times :attr:`coef_map`."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return eta(pairwise_distance(x, self.anchors.coords)) @ self.coef_map


def build_basis(anchors, k, constrained: bool) -> WarpBasis:
    if not isinstance(anchors, AnchorSet):
        anchors = AnchorSet(anchors)
    E = build_E(anchors)
    U_k, Lam = truncate_basis(E, k)
    Z = constraint_nullspace(anchors.T, U_k) if constrained else None
    for a in (E, U_k, Lam) + ((Z,) if Z is not None else ()):
        a.setflags(write=False)
    return WarpBasis(anchors=anchors, E=E, U_k=U_k, Lambda_k=Lam, Z_k=Z, k=int(k))


@dataclass(frozen=True)
class PenaltyBlock:
    start: int
    matrix: np.ndarray

    @property
    def stop(self) -> int:
        return self.start + self.matrix.shape[0]


@dataclass(frozen=True)
class PenaltyLayout:
    """Per-smooth penalty blocks ``S_1, ..., S_J`` over the full coefficient vector.

    Slots outside the blocks (the affine ``alpha`` coefficients and any
    covariance parameters) carry zero penalty.
    """

    blocks: Tuple[PenaltyBlock, ...]
    n_total: int

    def __post_init__(self):
        used = np.zeros(self.n_total, dtype=bool)
        for b in self.blocks:
            if b.stop > self.n_total:
                raise BasisError("penalty block extends past coefficient vector")
            if used[b.start:b.stop].any():
                raise BasisError("overlapping penalty blocks")
            used[b.start:b.stop] = True

    @property
    def n_smooth(self) -> int:
        return len(self.blocks)

    def dense(self, j: int) -> np.ndarray:
        S = np.zeros((self.n_total, self.n_total))
        b = self.blocks[j]
        S[b.start:b.stop, b.start:b.stop] = b.matrix
        return S

    def S_lambda(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        if lam.shape != (self.n_smooth,):
            raise BasisError(f"expected {self.n_smooth} smoothing parameters, got {lam.shape}")
        S = np.zeros((self.n_total, self.n_total))
        for l, b in zip(lam, self.blocks):
            S[b.start:b.stop, b.start:b.stop] += l * b.matrix
        return S

    def quad(self, beta, lam) -> float:
        """``beta' S_lambda beta`` without forming the dense matrix."""
        beta = np.asarray(beta, dtype=float)
        tot = 0.0
        for l, b in zip(lam, self.blocks):
            v = beta[b.start:b.stop]
            tot += l * float(v @ b.matrix @ v)
        return tot

    def with_padding(self, n_extra: int) -> "PenaltyLayout":
        return PenaltyLayout(self.blocks, self.n_total + int(n_extra))


def build_penalties(kind: str, bases: Sequence[WarpBasis], n_extra: int = 0) -> PenaltyLayout:
    """Penalty layout for a deformation or expansion warp.

    Coefficients are ordered ``(alpha_1, alpha_2, alpha_3, smooth_1, ...,
    smooth_J, <n_extra covariance slots>)``. Deformation blocks are
    ``Z' Lambda_k Z``; expansion blocks are diagonal in the retained
    eigenvalue magnitudes.
    """
    if kind not in ("deform", "expand"):
        raise BasisError(f"no penalties for warp kind {kind!r}")
    if kind == "deform" and len(bases) != 2:
        raise BasisError("deformation needs exactly two smooths")
    blocks: List[PenaltyBlock] = []
    pos = 3
    for basis in bases:
        if kind == "deform":
            if basis.Z_k is None:
                raise BasisError("deformation smooth lacks constraint null space")
            M = basis.penalty_block()
        else:
            M = basis.penalty_block(absolute=True)
        M.setflags(write=False)
        blocks.append(PenaltyBlock(pos, M))
        pos += M.shape[0]
    return PenaltyLayout(tuple(blocks), pos + int(n_extra))
