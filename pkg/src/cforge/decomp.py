"""Deficit decompositions.

* :func:`kallen_decompose` writes a metric field as
  ``sum a_i^2 xi_i xi_i + sum_{i<=n} mu_i^-2 grad a_i grad a_i + E`` by a
  fixed-point recursion on the amplitudes.
* :func:`oscillatory_reduce` performs repeated integration by parts on an
  oscillatory matrix field ``gamma(lam x.xi_i) Q``.
* :func:`newton_decompose` solves the perturbed pointwise system with
  extra ``sqrt(a^2 - T) G`` and ``sqrt(a^2 - T) sqrt(a^2 - T) Theta`` terms.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (AmplitudeFloorError, DecompositionFailure, DeficitTooLargeError, NyquistError,
                     PreconditionError)
from .fieldlab import (NYQUIST_LIMIT, GridDomain, MetricField, ScalarField, VectorField, gradient,
                       seminorm, sup_norm)
from .profiles import PeriodicProfile, primitive
from .symcore import PrimitiveBasis, project_L, reconstruct, solve_phi, svec, sym

__all__ = [
    "KallenDecomposition",
    "kallen_decompose",
    "OscillatoryReduction",
    "oscillatory_reduce",
    "NewtonDecomposition",
    "newton_decompose",
    "gradient_term",
    "HypothesisWarning",
]


class HypothesisWarning(UserWarning):
    """A smallness hypothesis of a decomposition is not met."""


def _flag(check: str, exc: type, msg: str) -> None:
    if check == "raise":
        raise exc(msg)
    if check == "warn":
        warnings.warn(msg, HypothesisWarning, stacklevel=3)


def _sqrt_amplitudes(basis: PrimitiveBasis, coeff: np.ndarray, check: str, where: str) -> np.ndarray:
    lo = float(coeff.min())
    if lo < 0:
        raise DecompositionFailure(f"{where}: negative coordinate L_i = {lo:.3e}")
    a = np.sqrt(coeff)
    floor = np.sqrt(basis.sigma_star) / 2
    if a.min() < floor:
        _flag(check, AmplitudeFloorError, f"{where}: amplitude {a.min():.4f} below floor {floor:.4f}")
    return a


def gradient_term(domain: GridDomain, amps: np.ndarray, mu, n: int, scheme: str = "spectral") -> np.ndarray:
    """``sum_{i<=n} mu_i^-2 grad a_i (x) grad a_i`` for amplitudes of shape ``grid + (n_star,)``."""
    out = np.zeros(domain.shape + (domain.n, domain.n))
    for i in range(n):
        g = gradient(domain, amps[..., i], scheme)
        out += np.einsum("...a,...b->...ab", g, g) / mu[i + 1] ** 2
    return out


@dataclass
class KallenDecomposition:
    """Result of :func:`kallen_decompose`.

    Attributes
    ----------
    j : int
        Number of fixed-point sweeps after the initial amplitudes.
    amplitudes : ndarray, shape ``grid + (n_star,)``
    residual : MetricField
        ``E^j``.
    mu : tuple of float
    residual_history : list of float
        ``||E^k||_0`` for ``k = 0..j``.
    """

    j: int
    amplitudes: np.ndarray
    residual: MetricField
    mu: tuple
    residual_history: list = field(default_factory=list)

    def amplitude(self, i: int, domain: GridDomain) -> ScalarField:
        return ScalarField(domain, self.amplitudes[..., i - 1])

    def reconstruction_residual(self, basis: PrimitiveBasis, h: MetricField, scheme: str = "spectral") -> float:
        dom = h.domain
        total = reconstruct(basis, self.amplitudes ** 2) + gradient_term(dom, self.amplitudes, self.mu, basis.n, scheme)
        total = total + self.residual.values
        return float(np.abs(total - h.values).max())


def kallen_decompose(basis: PrimitiveBasis, h: MetricField, mu, j: int, check: str = "raise",
                     scheme: str = "spectral", tolerance: float = 1e-12) -> KallenDecomposition:
    """Amplitude extraction with gradient correction.

    Parameters
    ----------
    basis : PrimitiveBasis
    h : MetricField
    mu : sequence of float
        ``mu_0 <= mu_1 <= ... <= mu_n``.
    j : int
        Number of sweeps ``a^(k+1) = sqrt(L(h - sum mu^-2 grad a^(k) grad a^(k)))``
        after ``a^(0) = sqrt(L(h))``.
    check : {'raise', 'warn', 'off'}
        Handling of the smallness hypotheses and of the amplitude floor.
        Negative coordinates always raise.

    Raises
    ------
    DeficitTooLargeError
        ``||h - h_star||_0 + mu_0/mu_1 > 2 sigma_0`` with ``check='raise'``.
    DecompositionFailure
        A coordinate ``L_i`` became negative.
    """
    n = basis.n
    mu = tuple(float(m) for m in mu)
    if len(mu) < n + 1:
        raise PreconditionError(f"need mu_0..mu_{n}, got {len(mu)} values")
    if any(b < a for a, b in zip(mu, mu[1:])) or mu[0] < 1:
        raise PreconditionError("frequencies must satisfy 1 <= mu_0 <= mu_1 <= ...")
    if j < 0:
        raise PreconditionError("depth must be nonnegative")
    dom = h.domain
    lhs = sup_norm(h - MetricField.constant(dom, basis.h_star)) + mu[0] / mu[1]
    if lhs > 2 * basis.sigma_0 * (1 + tolerance):
        _flag(check, DeficitTooLargeError,
              f"||h - h_star||_0 + mu0/mu1 = {lhs:.4g} exceeds 2 sigma_0 = {2 * basis.sigma_0:.4g}")
    if check != "off":
        for order in (1, 2):
            s = seminorm(h, order, scheme)
            if s > mu[0] ** order * (1 + tolerance):
                warnings.warn(f"[h]_{order} = {s:.4g} exceeds mu_0^{order} = {mu[0] ** order:.4g}",
                              HypothesisWarning, stacklevel=2)

    hv = h.values
    a = _sqrt_amplitudes(basis, project_L(basis, hv), check, "initial amplitudes")
    f_prev = gradient_term(dom, a, mu, n, scheme)
    history = [sup_norm(MetricField(dom, -f_prev))]
    E = -f_prev
    for k in range(j):
        a = _sqrt_amplitudes(basis, project_L(basis, hv - f_prev), check, f"sweep {k + 1}")
        f_new = gradient_term(dom, a, mu, n, scheme)
        E = f_prev - f_new
        history.append(sup_norm(MetricField(dom, E)))
        f_prev = f_new
    return KallenDecomposition(j, a, MetricField(dom, E), mu, history)


# --------------------------------------------------------------------------
# oscillatory reduction


@dataclass
class OscillatoryReduction:
    """Result of :func:`oscillatory_reduce`.

    The identity
    ``gamma(lam x.xi_i) Q = 2 sym(grad w) + gamma_out(lam x.xi_i) (mu/lam)^j G + R``
    holds pointwise.
    """

    w: VectorField
    G: MetricField
    R: MetricField
    gamma_out: PeriodicProfile
    j: int
    lam: float
    mu: float
    i: int
    direction: np.ndarray
    R_coefficients: np.ndarray = None

    def remainder(self) -> np.ndarray:
        """``gamma_out(lam x.xi_i) (mu/lam)^j G`` on the grid."""
        dom = self.G.domain
        ph = dom.phase(self.direction, self.lam)
        return self.gamma_out(ph)[..., None, None] * (self.mu / self.lam) ** self.j * self.G.values

    def sym_grad_w(self, scheme: str = "spectral") -> np.ndarray:
        dom = self.w.domain
        g = gradient(dom, self.w.values, scheme)
        return 2 * sym(g)

    def identity_residual(self, Q: MetricField, gamma: PeriodicProfile, scheme: str = "spectral") -> float:
        dom = Q.domain
        lhs = gamma(dom.phase(self.direction, self.lam))[..., None, None] * Q.values
        rhs = self.sym_grad_w(scheme) + self.remainder() + self.R.values
        return float(np.abs(lhs - rhs).max())


def _max_mode(p: PeriodicProfile) -> int:
    return int(p._active.max()) if p._active.size else 0


def oscillatory_reduce(basis: PrimitiveBasis, Q: MetricField, gamma: PeriodicProfile, i: int, lam: float,
                       mu: float, K: float = 1.0, j: int = 1, c_star: float = 1.0,
                       scheme: str = "spectral") -> OscillatoryReduction:
    """Iterative integration by parts of ``gamma(lam x.xi_i) Q``.

    Each round splits the current coefficient ``M`` with ``Phi_i`` into
    ``c_star alpha (.) xi_i + sum_k beta_k xi_k xi_k`` (``k > n``), moves
    the ``beta`` part into ``R``, absorbs the ``alpha`` part into
    ``2 sym(grad w)`` through the primitive of the profile, and continues
    with the remainder ``-(c_star/lam) Gamma sym(grad alpha)``.

    Parameters
    ----------
    basis : PrimitiveBasis
    Q : MetricField
    gamma : PeriodicProfile
        Zero-mean profile.
    i : int
        Direction index ``1..n``.
    lam, mu : float
        Oscillation frequency and the frequency scale of ``Q``,
        ``lam >= mu >= 1``.
    K : float
        Amplitude bound of ``Q`` (only used for reporting).
    j : int
        Number of rounds.
    """
    if not lam >= mu >= 1:
        raise PreconditionError(f"need lam >= mu >= 1, got lam={lam}, mu={mu}")
    if abs(gamma.mean) > 1e-12:
        raise PreconditionError("profile must have zero mean")
    if not 1 <= i <= basis.n:
        raise PreconditionError(f"direction index must be in 1..{basis.n}")
    dom = Q.domain
    xi = basis.xi[i - 1]
    top = max(_max_mode(gamma), 1)
    if lam * top * np.abs(xi).max() * dom.spacing > NYQUIST_LIMIT * (1 + 1e-12):
        raise NyquistError(f"lam={lam:g} with profile modes up to {top} is under-resolved")
    phase = dom.phase(xi, lam)
    n = basis.n
    w = np.zeros(dom.shape + (n,))
    R = np.zeros(dom.shape + (n, n))
    Rc = np.zeros(dom.shape + (basis.n_star - n,))
    M = Q.values
    prof = gamma
    for _ in range(j):
        alpha, beta = solve_phi(basis, i, c_star, M)
        gvals = prof(phase)
        Rc = Rc + gvals[..., None] * beta
        prim = primitive(prof)
        w = w + (c_star / (2 * lam)) * prim(phase)[..., None] * alpha
        M = -(c_star / lam) * sym(gradient(dom, alpha, scheme))
        prof = prim
    R = reconstruct_tail(basis, Rc)
    G = M * (lam / mu) ** j if j else M
    return OscillatoryReduction(VectorField(dom, w), MetricField(dom, G), MetricField(dom, R), prof, j, lam, mu, i,
                                xi.copy(), Rc)


def reconstruct_tail(basis: PrimitiveBasis, coeffs: np.ndarray) -> np.ndarray:
    """``sum_{k>n} c_k xi_k (x) xi_k`` for ``coeffs`` of shape ``(..., n_star - n)``."""
    return np.einsum("...k,kab->...ab", coeffs, basis.rank_one[basis.n:])


# --------------------------------------------------------------------------
# Newton decomposition


@dataclass
class NewtonDecomposition:
    """Result of :func:`newton_decompose`."""

    j: int
    amplitudes: np.ndarray
    residual: MetricField
    mu: tuple
    newton_iterations: int
    offset: int
    residual_history: list = field(default_factory=list)
    hypothesis_lhs: float = float("nan")
    ite01_ok: bool | None = None

    def reconstruction(self, basis, T, G, Theta, domain, scheme="spectral") -> np.ndarray:
        a = self.amplitudes
        b = _b_values(a, T, self.offset)
        return (reconstruct(basis, a ** 2) + gradient_term(domain, a, self.mu, basis.n, scheme)
                + _perturbation(b, G, Theta) + self.residual.values)


def _field_vals(x, shape, trailing=()):
    if x is None:
        return None
    v = x.values if hasattr(x, "values") else np.asarray(x, dtype=float)
    return np.broadcast_to(v, shape + trailing)


def _b_values(a, T, offset):
    return np.stack([np.sqrt(a[..., offset + k] ** 2 - T[k]) for k in range(len(T))], axis=-1)


def _perturbation(b, G, Theta):
    out = 0.0
    m = b.shape[-1]
    for k in range(m):
        out = out + b[..., k, None, None] * G[k]
        for l in range(m):
            out = out + (b[..., k] * b[..., l])[..., None, None] * Theta[k][l]
    return out


def newton_decompose(basis: PrimitiveBasis, h: MetricField, T, G, Theta, mu, j: int = 0, offset: int | None = None,
                     check: str = "raise", scheme: str = "spectral", max_iter: int = 50,
                     step_tol: float = 1e-12) -> NewtonDecomposition:
    """Decomposition with perturbation terms, solved pointwise by Newton's method.

    Solves ``sum a_i^2 xi_i xi_i + sum_k b_k G_k + sum_kl b_k b_l Theta_kl = h``
    with ``b_k = sqrt(a_{offset+k}^2 - T_k)`` starting from
    ``a = sqrt(L(h))``, then runs ``j`` sweeps of the gradient-absorption
    recursion ``a <- sqrt(L(h - f(a)))`` where ``f`` collects the gradient
    and perturbation terms.

    Parameters
    ----------
    T : sequence of n/2 scalar fields (or scalars)
    G : sequence of n/2 metric fields (or constant matrices)
    Theta : (n/2) x (n/2) nested sequence of metric fields
    offset : int, optional
        0-based index of the first amplitude entering the square roots;
        defaults to ``n`` (the directions ``n+1 .. 3n/2``).

    Raises
    ------
    DecompositionFailure
        Newton does not converge within ``max_iter`` iterations.
    AmplitudeFloorError
        ``a^2 - T_k < sigma_star / 4`` somewhere.
    """
    n = basis.n
    if n % 2:
        raise PreconditionError("newton_decompose needs an even dimension")
    half = n // 2
    offset = n if offset is None else int(offset)
    if not 0 <= offset <= basis.n_star - half:
        raise PreconditionError("offset out of range")
    mu = tuple(float(m) for m in mu)
    if len(mu) < n + 1:
        raise PreconditionError(f"need at least mu_0..mu_{n}")
    dom = h.domain
    shape = dom.shape
    if len(T) != half or len(G) != half or len(Theta) != half or any(len(r) != half for r in Theta):
        raise PreconditionError(f"need n/2 = {half} T and G terms and a {half}x{half} Theta array")
    Tv = [_field_vals(t, shape) for t in T]
    Gv = [sym(np.array(_field_vals(g, shape, (n, n)))) for g in G]
    Th = [[sym(np.array(_field_vals(t, shape, (n, n)))) for t in row] for row in Theta]

    sigma_hat = basis.sigma_star / 16
    hs = MetricField.constant(dom, basis.h_star)
    lhs = sup_norm(h - hs) + sum(float(np.abs(t).max()) for t in Tv)
    lhs += sum(sup_norm(MetricField(dom, g)) for g in Gv)
    lhs += sum(sup_norm(MetricField(dom, t)) for row in Th for t in row)
    lhs += mu[0] / mu[1]
    if len(mu) > n + half + 1:
        n2 = n + half - 1
        lhs += np.sqrt(mu[n2] / mu[n2 + 1])
    if lhs > 2 * sigma_hat:
        _flag(check, DeficitTooLargeError, f"smallness sum {lhs:.4g} exceeds 2 sigma_hat = {2 * sigma_hat:.4g}")
    ite01 = None
    if len(mu) > n + half:
        n2 = n + half - 1
        ite01 = (mu[0] / mu[1]) ** 2 >= mu[n2] / mu[n2 + 1]

    hv = h.values
    a = np.sqrt(np.maximum(project_L(basis, hv), 0.0))
    P = int(np.prod(shape))
    ns = basis.n_star
    ro = basis.rank_one
    ro_vec = svec(ro)  # (n_star, n_star): column i is svec(xi_i xi_i)
    target = svec(hv).reshape(P, ns)
    Gf = [svec(g).reshape(P, ns) for g in Gv]
    Tf = [t.reshape(P) for t in Tv]
    Thf = [[svec(t).reshape(P, ns) for t in row] for row in Th]
    af = a.reshape(P, ns).copy()
    floor = basis.sigma_star / 4
    iterations = 0
    for it in range(max_iter + 1):
        b2 = np.stack([af[:, offset + k] ** 2 - Tf[k] for k in range(half)], axis=-1)
        if b2.min() < floor:
            raise AmplitudeFloorError(f"a^2 - T = {b2.min():.4g} below sigma_star/4 = {floor:.4g}")
        b = np.sqrt(b2)
        F = (af ** 2) @ ro_vec - target
        for k in range(half):
            F += b[:, k, None] * Gf[k]
            for l in range(half):
                F += (b[:, k] * b[:, l])[:, None] * Thf[k][l]
        Jm = 2 * af[:, None, :] * ro_vec.T[None, :, :]
        for k in range(half):
            col = Gf[k].copy()
            for l in range(half):
                col += b[:, l, None] * (Thf[k][l] + Thf[l][k])
            Jm[:, :, offset + k] += (af[:, offset + k] / b[:, k])[:, None] * col
        step = np.linalg.solve(Jm, -F[..., None])[..., 0]
        size = float(np.abs(step).max())
        if size <= step_tol * max(1.0, float(np.abs(af).max())):
            break
        if it == max_iter:
            raise DecompositionFailure(f"Newton did not converge in {max_iter} iterations (last step {size:.3e})")
        af += step
        iterations += 1
    a = af.reshape(shape + (ns,))
    floor_a = np.sqrt(basis.sigma_star) / 2
    if a.min() < floor_a:
        _flag(check, AmplitudeFloorError, f"amplitude {a.min():.4f} below floor {floor_a:.4f}")

    def f_of(amps):
        bb = _b_values(amps, Tv, offset)
        return gradient_term(dom, amps, mu, n, scheme) + _perturbation(bb, Gv, Th)

    g_prev = gradient_term(dom, a, mu, n, scheme)
    E = -g_prev
    history = [sup_norm(MetricField(dom, E))]
    f_prev = f_of(a)
    for k in range(j):
        a = _sqrt_amplitudes(basis, project_L(basis, hv - f_prev), check, f"sweep {k + 1}")
        if min(float((a[..., offset + q] ** 2 - Tv[q]).min()) for q in range(half)) < floor:
            raise AmplitudeFloorError("a^2 - T below sigma_star/4 during the sweeps")
        f_new = f_of(a)
        E = f_prev - f_new
        history.append(sup_norm(MetricField(dom, E)))
        f_prev = f_new
    return NewtonDecomposition(j, a, MetricField(dom, E), mu, iterations, offset, history, lhs, ite01)
