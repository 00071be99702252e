"""Symmetric-matrix algebra on the primitive basis.

The basis consists of the unit vectors ``e_i`` followed by the normalized
diagonals ``(e_i + e_j)/sqrt(2)`` for ``i < j`` in lexicographic order.  The
rank-one matrices ``xi (x) xi`` form a basis of ``Sym_n``; the coordinate maps
``L_i`` are obtained from one LU factorization of their Gram matrix.

All functions accept a single matrix ``(n, n)`` or a stacked field
``(..., n, n)``; leading axes are treated as grid axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .errors import DimensionMismatchError, InvalidDimensionError, PreconditionError, SingularMapError

__all__ = [
    "PrimitiveBasis",
    "sym",
    "svec",
    "smat",
    "build_basis",
    "project_L",
    "reconstruct",
    "estimate_sigma_star",
    "sigma_star_bound",
    "phi_matrix",
    "apply_phi",
    "solve_phi",
    "phi_condition",
]

DEFAULT_SEED = 20240917


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part of the trailing two axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _pairs(n: int) -> list[tuple[int, int]]:
    return list(combinations(range(n), 2))


def svec(m: np.ndarray) -> np.ndarray:
    """Isometric vectorization of symmetric matrices.

    Diagonal entries come first, then ``sqrt(2) * m[i, j]`` for ``i < j`` in
    lexicographic order, so that the Frobenius inner product becomes the
    Euclidean one.
    """
    n = m.shape[-1]
    iu = np.array(_pairs(n), dtype=int).reshape(-1, 2)
    diag = np.diagonal(m, axis1=-2, axis2=-1)
    off = np.sqrt(2.0) * m[..., iu[:, 0], iu[:, 1]]
    return np.concatenate([diag, off], axis=-1)


def smat(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`svec`."""
    out = np.zeros(v.shape[:-1] + (n, n))
    idx = np.arange(n)
    out[..., idx, idx] = v[..., :n]
    iu = np.array(_pairs(n), dtype=int).reshape(-1, 2)
    off = v[..., n:] / np.sqrt(2.0)
    out[..., iu[:, 0], iu[:, 1]] = off
    out[..., iu[:, 1], iu[:, 0]] = off
    return out


@dataclass(frozen=True)
class PrimitiveBasis:
    """The fixed primitive directions for dimension ``n``.

    Attributes
    ----------
    n : int
        Dimension of the box.
    xi : ndarray, shape (n_star, n)
        Unit directions, one per row.
    h_star : ndarray, shape (n, n)
        Sum of the rank-one matrices ``xi_i (x) xi_i``.
    sigma_star : float
        Positivity margin of the coordinate maps around ``h_star``.
    sigma_0 : float
        ``sqrt(sigma_star) / 2``.
    """

    n: int
    xi: np.ndarray
    h_star: np.ndarray
    sigma_star: float
    sigma_0: float
    _lu: tuple = field(repr=False, compare=False)

    @property
    def n_star(self) -> int:
        return self.n * (self.n + 1) // 2

    @property
    def rank_one(self) -> np.ndarray:
        """Stack of ``xi_i (x) xi_i``, shape (n_star, n, n)."""
        return np.einsum("ia,ib->iab", self.xi, self.xi)

    @property
    def gram(self) -> np.ndarray:
        g = self.xi @ self.xi.T
        return g * g

    def pair_of(self, k: int) -> tuple[int, int]:
        """Coordinate pair ``(a, b)`` of a diagonal direction (0-based ``k >= n``)."""
        return _pairs(self.n)[k - self.n]


def _raw_basis(n: int) -> np.ndarray:
    eye = np.eye(n)
    rows = [eye[i] for i in range(n)]
    for i, j in _pairs(n):
        v = eye[i] + eye[j]
        rows.append(v / np.linalg.norm(v))
    return np.array(rows)


def build_basis(n: int, samples: int = 4000, seed: int = DEFAULT_SEED) -> PrimitiveBasis:
    """Construct the primitive basis of ``Sym_n``.

    ``sigma_star`` is estimated by seeded randomized bisection (see
    :func:`estimate_sigma_star`) and ``sigma_0 = sqrt(sigma_star) / 2``.
    """
    if int(n) != n or n < 2:
        raise InvalidDimensionError(f"dimension must be an integer >= 2, got {n}")
    n = int(n)
    xi = _raw_basis(n)
    xi.setflags(write=False)
    h_star = sym(np.einsum("ia,ib->ab", xi, xi))
    h_star.setflags(write=False)
    g = xi @ xi.T
    lu = lu_factor(g * g)
    tmp = PrimitiveBasis(n, xi, h_star, np.nan, np.nan, lu)
    sigma = estimate_sigma_star(tmp, samples=samples, seed=seed)
    return PrimitiveBasis(n, xi, h_star, sigma, float(np.sqrt(sigma) / 2.0), lu)


def _check_dim(basis: PrimitiveBasis, h: np.ndarray) -> None:
    if h.ndim < 2 or h.shape[-1] != basis.n or h.shape[-2] != basis.n:
        raise DimensionMismatchError(f"expected trailing shape ({basis.n}, {basis.n}), got {h.shape}")


def project_L(basis: PrimitiveBasis, h: np.ndarray) -> np.ndarray:
    """Coefficients ``c`` with ``sum_i c_i xi_i (x) xi_i = h``.

    Parameters
    ----------
    basis : PrimitiveBasis
    h : ndarray, shape (..., n, n)

    Returns
    -------
    ndarray, shape (..., n_star)
    """
    h = np.asarray(h, dtype=float)
    _check_dim(basis, h)
    # right-hand side <xi_i xi_i^T, h>_F = xi_i^T h xi_i
    rhs = np.einsum("ia,...ab,ib->...i", basis.xi, sym(h), basis.xi)
    flat = rhs.reshape(-1, basis.n_star).T
    sol = lu_solve(basis._lu, flat)
    return sol.T.reshape(rhs.shape)


def reconstruct(basis: PrimitiveBasis, c: np.ndarray) -> np.ndarray:
    """``sum_i c_i xi_i (x) xi_i`` for coefficient arrays of shape (..., n_star)."""
    return np.einsum("...i,iab->...ab", c, basis.rank_one)


def _sample_sym_unit(rng: np.random.Generator, n: int, count: int) -> np.ndarray:
    a = rng.standard_normal((count, n, n))
    a = sym(a)
    a /= np.linalg.norm(a, axis=(1, 2), keepdims=True)
    return a


def estimate_sigma_star(basis: PrimitiveBasis, samples: int = 4000, seed: int = DEFAULT_SEED,
                        iterations: int = 60) -> float:
    """Randomized bisection estimate of the positivity margin, halved.

    For a trial ``sigma`` the check draws ``samples`` symmetric matrices
    ``h`` with ``|h - h_star|_F <= 2 sigma`` (half of them on the boundary
    sphere) and requires ``min_i L_i(h) >= sigma``.  The same draws are
    reused for every trial, which keeps the predicate monotone in
    ``sigma``.
    """
    if samples < 1000:
        raise PreconditionError("estimate_sigma_star needs at least 1000 samples")
    rng = np.random.default_rng(seed)
    n = basis.n
    dirs = _sample_sym_unit(rng, n, samples)
    dim = basis.n_star
    radii = rng.uniform(size=samples) ** (1.0 / dim)
    radii[: samples // 2] = 1.0
    # L is linear and L_i(h_star) = 1, so L_i(h_star + r H) = 1 + r L_i(H).
    coeff = project_L(basis, dirs)
    worst = np.max(-coeff * radii[:, None])

    def ok(sigma: float) -> bool:
        return 1.0 - 2.0 * sigma * worst >= sigma

    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * lo


def sigma_star_bound(basis: PrimitiveBasis) -> float:
    """Exact optimal margin ``1 / (1 + 2 max_i |L_i|)`` with the Frobenius dual norm.

    Used as an independent check: any valid ``sigma_star`` is at most this value.
    """
    eye = np.eye(basis.n_star)
    # L_i(h) = (G^{-1} r(h))_i with r_k(h) = <xi_k xi_k, h>; the Riesz
    # representer of L_i is sum_k (G^{-1})_{ik} xi_k xi_k.
    ginv = lu_solve(basis._lu, eye)
    reps = np.einsum("ik,kab->iab", ginv, basis.rank_one)
    norms = np.linalg.norm(reps, axis=(1, 2))
    return float(1.0 / (1.0 + 2.0 * norms.max()))


def phi_matrix(basis: PrimitiveBasis, i: int, c_star: float = 1.0) -> np.ndarray:
    """Matrix of ``Phi_i`` in ``svec`` coordinates, shape (n_star, n_star).

    Columns ``0..n-1`` act on ``alpha`` and the remaining ones on ``beta``.
    ``i`` is 1-based.
    """
    n = basis.n
    if not 1 <= i <= n:
        raise PreconditionError(f"direction index must be in 1..{n}, got {i}")
    xi_i = basis.xi[i - 1]
    cols = []
    for a in range(n):
        e = np.zeros(n)
        e[a] = 1.0
        cols.append(svec(c_star * 0.5 * (np.outer(e, xi_i) + np.outer(xi_i, e))))
    for k in range(n, basis.n_star):
        cols.append(svec(np.outer(basis.xi[k], basis.xi[k])))
    return np.array(cols).T


def apply_phi(basis: PrimitiveBasis, i: int, c_star: float, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Evaluate ``c_star alpha (.) xi_i + sum_k beta_k xi_{n+k} (x) xi_{n+k}``."""
    xi_i = basis.xi[i - 1]
    a = np.asarray(alpha, dtype=float)
    out = c_star * 0.5 * (a[..., :, None] * xi_i[None, :] + xi_i[:, None] * a[..., None, :])
    out = out + np.einsum("...k,kab->...ab", np.asarray(beta, dtype=float), basis.rank_one[basis.n:])
    return out


_PHI_CACHE: dict = {}


def solve_phi(basis: PrimitiveBasis, i: int, c_star: float, M: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Invert ``Phi_i``: find ``(alpha, beta)`` with ``Phi_i(alpha, beta) = M``.

    Parameters
    ----------
    basis : PrimitiveBasis
    i : int
        Direction index, 1-based, ``1 <= i <= n``.
    c_star : float
        Nonzero scale of the symmetric-product part.
    M : ndarray, shape (..., n, n)

    Returns
    -------
    alpha : ndarray, shape (..., n)
    beta : ndarray, shape (..., n_star - n)
    """
    if c_star == 0:
        raise SingularMapError("Phi_i is singular for c_star = 0")
    M = np.asarray(M, dtype=float)
    _check_dim(basis, M)
    key = (basis.n, i, float(c_star))
    lu = _PHI_CACHE.get(key)
    if lu is None:
        lu = lu_factor(phi_matrix(basis, i, c_star))
        _PHI_CACHE[key] = lu
    rhs = svec(sym(M))
    sol = lu_solve(lu, rhs.reshape(-1, basis.n_star).T).T.reshape(rhs.shape)
    return sol[..., : basis.n], sol[..., basis.n:]


def phi_condition(basis: PrimitiveBasis, i: int, c_star: float = 1.0) -> float:
    """2-norm condition number of ``Phi_i`` in isometric coordinates."""
    return float(np.linalg.cond(phi_matrix(basis, i, c_star)))
