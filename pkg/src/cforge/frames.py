"""Orthonormal normal frames and the tangential correction matrix.

A frame is built per grid point by projecting the candidate vectors
``e_{n+1}, ..., e_d, e_1, ..., e_n`` onto the normal space of ``du`` and
orthonormalizing them in that fixed order (classical Gram-Schmidt applied
twice).  Candidates whose projected norm drops below ``PIVOT_TOL`` are
skipped.  Points where the default order does not yield ``d - n`` vectors
from the first ``d - n`` candidates reuse the candidate order of their
lexicographically smallest already-processed neighbour, which keeps the
selection locally consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateImmersionError, PreconditionError
from .fieldlab import ImmersionField, gradient, pullback_metric

__all__ = ["NormalFrame", "build_frame", "tangential_correction", "frame_residuals", "PIVOT_TOL"]

CHUNK = 1 << 16
PIVOT_TOL = 1e-8


@dataclass
class NormalFrame:
    """Normal vectors along an immersion.

    Attributes
    ----------
    base : ImmersionField
    vectors : ndarray, shape ``grid + (d - n, d)``
        ``vectors[..., k, :]`` is the ``k``-th normal field.
    smoothness : float
        Measured ``max_k sup |grad eta_k| / (1 + [u]_2)``.
    """

    base: ImmersionField
    vectors: np.ndarray
    smoothness: float = float("nan")

    @property
    def count(self) -> int:
        return self.vectors.shape[-2]

    def __getitem__(self, k: int) -> np.ndarray:
        return self.vectors[..., k, :]


def _tangent_basis(J: np.ndarray) -> np.ndarray:
    q, _ = np.linalg.qr(J)
    return q


def _orthonormalize(cands: np.ndarray, q: np.ndarray, need: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched Gram-Schmidt of candidate columns against ``q``.

    Parameters
    ----------
    cands : (P, d, c) candidate columns in order
    q : (P, d, n) orthonormal tangent basis

    Returns
    -------
    frame : (P, need, d)
    ok : (P,) bool, true where the first ``need`` candidates all survived
    """
    P, d, c = cands.shape
    basis = q
    out = np.zeros((P, need, d))
    count = np.zeros(P, dtype=int)
    ok = np.ones(P, dtype=bool)
    for j in range(c):
        v = cands[:, :, j].copy()
        for _ in range(2):
            v -= np.einsum("pdk,pk->pd", basis, np.einsum("pdk,pd->pk", basis, v))
            if count.max() > 0:
                prev = out[:, : count.max(), :]
                mask = (np.arange(prev.shape[1])[None, :] < count[:, None]).astype(float)
                coef = np.einsum("pkd,pd->pk", prev, v) * mask
                v -= np.einsum("pkd,pk->pd", prev, coef)
        nv = np.linalg.norm(v, axis=1)
        take = (nv >= PIVOT_TOL) & (count < need)
        if j < need:
            ok &= take
        idx = np.nonzero(take)[0]
        out[idx, count[idx], :] = v[idx] / nv[idx, None]
        count[idx] += 1
    if (count < need).any():
        raise DegenerateImmersionError("normal space has lower dimension than expected")
    return out, ok


def _candidate_order(d: int, n: int) -> list[int]:
    return list(range(n, d)) + list(range(n))


def build_frame(u: ImmersionField, gamma_bound: float = 1e3, measure_smoothness: bool = False) -> NormalFrame:
    """Orthonormal normal frame of ``u``.

    Parameters
    ----------
    u : ImmersionField
    gamma_bound : float
        The pullback metric must satisfy ``Id/gamma <= u^# e <= gamma Id``.
    measure_smoothness : bool
        Also record ``max |grad eta| / (1 + [u]_2)`` (spectral derivatives).

    Raises
    ------
    DegenerateImmersionError
        If the metric eigenvalues leave ``[1/gamma, gamma]``.
    """
    if not gamma_bound > 1:
        raise PreconditionError("gamma_bound must exceed 1")
    dom, n, d = u.domain, u.domain.n, u.d
    if d <= n:
        raise PreconditionError("codimension must be positive")
    ev = np.linalg.eigvalsh(pullback_metric(u).values)
    if ev.min() < 1.0 / gamma_bound or ev.max() > gamma_bound:
        raise DegenerateImmersionError(
            f"metric eigenvalues in [{ev.min():.3e}, {ev.max():.3e}] leave [1/{gamma_bound:g}, {gamma_bound:g}]"
        )
    J = u.jacobian.reshape(-1, d, n)
    order = _candidate_order(d, n)
    eye = np.eye(d)
    need = d - n
    frame = np.empty((J.shape[0], need, d))
    ok = np.empty(J.shape[0], dtype=bool)
    # per-point work, chunked to bound the memory of the batched QR
    for lo in range(0, J.shape[0], CHUNK):
        q = _tangent_basis(J[lo:lo + CHUNK])
        cands = np.broadcast_to(eye[:, order], (q.shape[0], d, d))
        frame[lo:lo + CHUNK], ok[lo:lo + CHUNK] = _orthonormalize(cands, q, need)
    if not ok.all():
        q = _tangent_basis(J)
        frame = _continue_degenerate(frame, ok, q, dom.shape, order, need)
    vectors = frame.reshape(dom.shape + (need, d))
    fr = NormalFrame(u, vectors)
    if measure_smoothness:
        grads = gradient(dom, vectors)
        worst = float(np.linalg.norm(grads, axis=(-2, -1)).max()) if need else 0.0
        from .fieldlab import seminorm
        fr.smoothness = worst / (1.0 + seminorm(u, 2))
    return fr


def _continue_degenerate(frame, ok, q, shape, order, need):
    """Recompute points where default pivots degenerate.

    Each such point adopts the pivot order used by its lexicographically
    smallest neighbour that has already been assigned one; the order is a
    rotation of the default list so that the preferred candidates stay
    first whenever possible.
    """
    d = q.shape[1]
    flat_orders: dict[int, list[int]] = {}
    bad = np.nonzero(~ok)[0]
    strides = np.cumprod((1,) + shape[::-1][:-1])[::-1]
    eye = np.eye(d)
    for p in bad:
        idx = np.array(np.unravel_index(p, shape))
        neigh = []
        for ax in range(len(shape)):
            for step in (-1, 1):
                j = idx.copy()
                j[ax] = (j[ax] + step) % shape[ax]
                neigh.append(int(np.dot(j, strides)))
        neigh.sort()
        chosen = None
        for nb in neigh:
            if nb in flat_orders:
                chosen = flat_orders[nb]
                break
        tried = [chosen] if chosen is not None else []
        tried += [order[r:] + order[:r] for r in range(1, d)]
        for cand in tried:
            f, good = _orthonormalize(eye[:, cand][None], q[p:p + 1], need)
            if good[0]:
                frame[p] = f[0]
                flat_orders[p] = cand
                break
        else:
            f, _ = _orthonormalize(eye[:, order][None], q[p:p + 1], need)
            frame[p] = f[0]
            flat_orders[p] = order
    return frame


def tangential_correction(u: ImmersionField) -> np.ndarray:
    """``F = du (u^# e)^{-1}``, shape ``grid + (d, n)``.

    Raises
    ------
    DegenerateImmersionError
        If the pullback metric is singular somewhere.
    """
    g = pullback_metric(u).values
    ev = np.linalg.eigvalsh(g)
    if ev.min() <= 1e-12 * max(1.0, ev.max()):
        raise DegenerateImmersionError("pullback metric is singular")
    ginv = np.linalg.inv(g)
    return np.einsum("...ia,...ab->...ib", u.jacobian, ginv)


def frame_residuals(frame: NormalFrame) -> tuple[float, float]:
    """Max orthonormality and normality residuals over the grid."""
    v = frame.vectors
    gram = np.einsum("...kd,...ld->...kl", v, v)
    orth = float(np.abs(gram - np.eye(v.shape[-2])).max())
    normal = float(np.abs(np.einsum("...da,...kd->...ka", frame.base.jacobian, v)).max())
    return orth, normal
