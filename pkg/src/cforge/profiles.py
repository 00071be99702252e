"""One-dimensional oscillatory building blocks.

``PeriodicProfile`` is a real trigonometric polynomial on ``[0, 2 pi)``
stored by its samples and FFT coefficients, so evaluation at arbitrary
phases, derivatives and zero-mean primitives are exact.

``CorrugationProfile`` tabulates the Kuiper pair

    Gamma_1(s, t) = int_0^t (sqrt(1+s^2) cos(sqrt(f(s)) sin tau) - 1) dtau
    Gamma_2(s, t) = int_0^t sqrt(1+s^2) sin(sqrt(f(s)) sin tau) dtau

where ``r = f(s)`` solves ``mean_t cos(sqrt(r) sin t) = (1+s^2)^(-1/2)``.
Each row ``Gamma(s_k, .)`` is stored through its Fourier coefficients and the
coefficients are cubic-spline interpolated in ``s``; evaluation in ``t`` is
therefore exact trigonometric summation and ``d/dt`` is analytic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq

from .errors import NotIntegrableError, PreconditionError, ProfileRangeError

__all__ = [
    "PeriodicProfile",
    "primitive",
    "mean_cos",
    "solve_f",
    "find_s_max",
    "CorrugationProfile",
    "build_corrugation",
    "default_profile",
]

QUAD_NODES = 128
BESSEL_ZERO = 2.404825557695773  # first zero of J_0


# --------------------------------------------------------------------------
# periodic profiles


@dataclass(frozen=True)
class PeriodicProfile:
    """A 2 pi-periodic trigonometric polynomial.

    Attributes
    ----------
    coeffs : ndarray of complex
        ``rfft(samples) / m`` for ``m`` uniform samples on ``[0, 2 pi)``.
    m : int
        Number of samples the coefficients were taken from.
    """

    coeffs: np.ndarray
    m: int
    zero_mean: bool = False
    _active: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mag = np.abs(self.coeffs)
        tol = 1e-15 * max(mag.max(), 1e-300)
        object.__setattr__(self, "_active", np.nonzero(mag > tol)[0])
        if self.zero_mean and abs(self.mean) > 1e-12:
            raise NotIntegrableError(f"profile flagged zero-mean has mean {self.mean:.3e}")

    @classmethod
    def from_samples(cls, samples, zero_mean: bool = False) -> "PeriodicProfile":
        samples = np.asarray(samples, dtype=float)
        m = samples.size
        return cls(np.fft.rfft(samples) / m, m, zero_mean)

    @classmethod
    def from_function(cls, fn, m: int = 64, zero_mean: bool = False) -> "PeriodicProfile":
        t = 2 * np.pi * np.arange(m) / m
        return cls.from_samples(fn(t), zero_mean)

    @classmethod
    def sin(cls, m: int = 16) -> "PeriodicProfile":
        return cls.from_function(np.sin, m, zero_mean=True)

    @classmethod
    def cos(cls, m: int = 16) -> "PeriodicProfile":
        return cls.from_function(np.cos, m, zero_mean=True)

    @property
    def mean(self) -> float:
        return float(self.coeffs[0].real)

    def samples(self) -> np.ndarray:
        return np.fft.irfft(self.coeffs * self.m, n=self.m)

    def _weights(self) -> np.ndarray:
        k = np.arange(self.coeffs.size)
        w = np.full(k.size, 2.0)
        w[0] = 1.0
        if self.m % 2 == 0:
            w[-1] = 1.0
        return w

    def __call__(self, t, derivative: int = 0) -> np.ndarray:
        """Evaluate the profile (or a derivative) at arbitrary phases."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape)
        w = self._weights()
        for k in self._active:
            c = self.coeffs[k] * w[k] * (1j * k) ** derivative
            if k == 0:
                out = out + c.real
                continue
            kt = k * t
            out = out + c.real * np.cos(kt) - c.imag * np.sin(kt)
        return out

    def derivative(self) -> "PeriodicProfile":
        k = np.arange(self.coeffs.size)
        c = self.coeffs * (1j * k)
        if self.m % 2 == 0:
            c[-1] = 0.0
        return PeriodicProfile(c, self.m, zero_mean=True)

    def integral_over_period(self) -> float:
        return 2 * np.pi * self.mean


def primitive(gamma: PeriodicProfile) -> PeriodicProfile:
    """Zero-mean antiderivative of a zero-mean profile."""
    if abs(gamma.mean) > 1e-12:
        raise NotIntegrableError(f"profile has mean {gamma.mean:.3e}; its primitive is not periodic")
    k = np.arange(gamma.coeffs.size, dtype=float)
    c = np.zeros_like(gamma.coeffs)
    c[1:] = gamma.coeffs[1:] / (1j * k[1:])
    if gamma.m % 2 == 0:
        c[-1] = 0.0
    return PeriodicProfile(c, gamma.m, zero_mean=True)


# --------------------------------------------------------------------------
# the implicit amplitude function


def mean_cos(r: float, nodes: int = QUAD_NODES) -> float:
    """``mean over t of cos(sqrt(r) sin t)`` by the periodic trapezoid rule."""
    t = 2 * np.pi * np.arange(nodes) / nodes
    return float(np.mean(np.cos(np.sqrt(max(r, 0.0)) * np.sin(t))))


def _root(s: float) -> float:
    if s == 0.0:
        return 0.0
    target = (1.0 + s * s) ** -0.5
    hi = BESSEL_ZERO ** 2
    F = lambda r: mean_cos(r) - target  # noqa: E731
    if F(hi) > 0:
        raise ProfileRangeError(f"no root of F(s, .) below the first Bessel zero for s={s}")
    return brentq(F, 0.0, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)


def find_s_max(ceiling: float = 2.0, samples: int = 401) -> float:
    """Largest ``s`` on ``[0, ceiling]`` with a bracketed root, then halved.

    ``J_0`` decreases from 1 to 0 on ``[0, j_{0,1}]`` while the target
    ``(1+s^2)^{-1/2}`` stays in ``(0, 1]``, so the bracket never fails; the
    scan then stops at ``ceiling`` and the result is ``ceiling / 2``.
    """
    best = 0.0
    for s in np.linspace(0.0, ceiling, samples):
        try:
            _root(float(s))
        except ProfileRangeError:
            break
        best = float(s)
    return 0.5 * best


S_MAX = 1.0


def solve_f(s: float, s_max: float = S_MAX) -> float:
    """The implicit amplitude function ``f(s)``.

    Raises
    ------
    ProfileRangeError
        If ``s`` lies outside ``[0, s_max]``.
    """
    if not 0.0 <= s <= s_max:
        raise ProfileRangeError(f"s={s} outside [0, {s_max}]")
    return _root(float(s))


# --------------------------------------------------------------------------
# corrugation profile


def _rows(s: float, r: float, t: np.ndarray):
    """Integrand rows ``dGamma/dt`` for one ``s``."""
    c = np.sqrt(1.0 + s * s)
    phase = np.sqrt(r) * np.sin(t)
    return c * np.cos(phase) - 1.0, c * np.sin(phase)


def _row_primitive_coeffs(dt_samples: np.ndarray) -> np.ndarray:
    """Fourier coefficients of ``int_0^t g`` for a zero-mean row ``g``."""
    m = dt_samples.size
    c = np.fft.rfft(dt_samples) / m
    k = np.arange(c.size, dtype=float)
    out = np.zeros_like(c)
    out[1:] = c[1:] / (1j * k[1:])
    if m % 2 == 0:
        out[-1] = 0.0
    # fix the constant so that the primitive vanishes at t = 0
    w = np.full(c.size, 2.0)
    w[0] = 1.0
    if m % 2 == 0:
        w[-1] = 1.0
    out[0] = -np.sum((out * w).real)
    return out


@dataclass(frozen=True)
class CorrugationProfile:
    """Tabulated Kuiper profile with derivative access.

    Tables (``s_samples x t_samples``) hold ``Gamma_1, Gamma_2`` and their
    ``t``- and ``s``-derivatives on the nodes.  Off-node evaluation goes
    through per-row Fourier coefficients interpolated by cubic splines in
    ``s``.
    """

    s_max: float
    s_grid: np.ndarray
    t_grid: np.ndarray
    f_table: np.ndarray
    gamma1: np.ndarray
    gamma2: np.ndarray
    dt_gamma1: np.ndarray
    dt_gamma2: np.ndarray
    ds_gamma1: np.ndarray
    ds_gamma2: np.ndarray
    _coef: tuple = field(repr=False, compare=False)
    _f_spline: CubicSpline = field(repr=False, compare=False)
    _modes: int = field(repr=False, compare=False, default=0)

    def f(self, s) -> np.ndarray:
        return self._f_spline(np.asarray(s, dtype=float))

    def _check(self, s: np.ndarray) -> None:
        if s.size and (s.min() < -1e-14 or s.max() > self.s_max * (1 + 1e-12)):
            raise ProfileRangeError(f"amplitude range [{s.min():.4g}, {s.max():.4g}] exceeds [0, {self.s_max}]")

    def evaluate(self, s, t, ds: bool = False):
        """Return ``(G1, G2, dtG1, dtG2)`` and, with ``ds=True``, also ``(dsG1, dsG2)``.

        ``s`` and ``t`` broadcast against each other.
        """
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        self._check(s)
        s = np.clip(s, 0.0, self.s_max)
        s, t = np.broadcast_arrays(s, t)
        re1, im1, re2, im2 = self._coef
        K = self._modes
        w = np.full(K, 2.0)
        w[0] = 1.0
        outs = [np.zeros(s.shape) for _ in range(6 if ds else 4)]
        flat_s = s.ravel()
        for k in range(K):
            a1 = re1[k](flat_s).reshape(s.shape) * w[k]
            b1 = im1[k](flat_s).reshape(s.shape) * w[k]
            a2 = re2[k](flat_s).reshape(s.shape) * w[k]
            b2 = im2[k](flat_s).reshape(s.shape) * w[k]
            if k == 0:
                outs[0] += a1
                outs[1] += a2
                if ds:
                    outs[4] += re1[k](flat_s, 1).reshape(s.shape)
                    outs[5] += re2[k](flat_s, 1).reshape(s.shape)
                continue
            ck, sk = np.cos(k * t), np.sin(k * t)
            outs[0] += a1 * ck - b1 * sk
            outs[1] += a2 * ck - b2 * sk
            outs[2] += -k * (a1 * sk + b1 * ck)
            outs[3] += -k * (a2 * sk + b2 * ck)
            if ds:
                da1 = re1[k](flat_s, 1).reshape(s.shape) * w[k]
                db1 = im1[k](flat_s, 1).reshape(s.shape) * w[k]
                da2 = re2[k](flat_s, 1).reshape(s.shape) * w[k]
                db2 = im2[k](flat_s, 1).reshape(s.shape) * w[k]
                outs[4] += da1 * ck - db1 * sk
                outs[5] += da2 * ck - db2 * sk
        return tuple(outs)

    def identity_residual(self) -> float:
        """Max over table nodes of ``|(1+dtG1)^2 + dtG2^2 - (1+s^2)|``."""
        lhs = (1 + self.dt_gamma1) ** 2 + self.dt_gamma2 ** 2
        rhs = 1 + self.s_grid[:, None] ** 2
        return float(np.abs(lhs - rhs).max())

    def bound_constants(self) -> dict:
        """Measured ``C(i)`` in ``|dt^i G1| <= C s^2`` and ``|dt^i G2| <= C s`` for i = 0, 1, 2."""
        s = self.s_grid[1:]
        t = self.t_grid
        out = {}
        m = t.size
        k = np.fft.rfftfreq(m, d=1.0 / m)
        for i in range(3):
            for name, tab, p in (("gamma1", self.gamma1, 2), ("gamma2", self.gamma2, 1)):
                row = tab[1:]
                if i:
                    row = np.fft.irfft(np.fft.rfft(row, axis=1) * (1j * k) ** i, n=m, axis=1)
                out[f"{name}_dt{i}"] = float((np.abs(row).max(axis=1) / s ** p).max())
        return out

    def to_csv(self, f_path, gamma_path=None) -> None:
        """Write ``(s, f(s))`` and optionally the node tables as CSV."""
        with open(f_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "f"])
            for s, r in zip(self.s_grid, self.f_table):
                w.writerow([f"{s:.17g}", f"{r:.17g}"])
        if gamma_path is not None:
            with open(gamma_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["s", "t", "gamma1", "gamma2", "dt_gamma1", "dt_gamma2", "ds_gamma1", "ds_gamma2"])
                for a, s in enumerate(self.s_grid):
                    for b, t in enumerate(self.t_grid):
                        w.writerow([f"{v:.17g}" for v in (
                            s, t, self.gamma1[a, b], self.gamma2[a, b], self.dt_gamma1[a, b],
                            self.dt_gamma2[a, b], self.ds_gamma1[a, b], self.ds_gamma2[a, b])])


def build_corrugation(s_max: float = S_MAX, s_samples: int = 129, t_samples: int = 128) -> CorrugationProfile:
    """Tabulate the Kuiper profile on ``[0, s_max] x [0, 2 pi)``.

    The ``s``-derivative tables use the implicit derivative
    ``f'(s) = -d_s F / d_r F`` of the defining equation.
    """
    if s_samples < 64 or t_samples < 64:
        raise PreconditionError("s_samples and t_samples must both be at least 64")
    if not 0 < s_max <= 2 * S_MAX:
        raise ProfileRangeError(f"s_max={s_max} outside the scanned range")
    s_grid = np.linspace(0.0, s_max, s_samples)
    t = 2 * np.pi * np.arange(t_samples) / t_samples
    f_tab = np.array([_root(float(s)) for s in s_grid])

    # implicit derivative of f: F(s, r) = mean cos(sqrt r sin t) - (1+s^2)^(-1/2)
    tq = 2 * np.pi * np.arange(QUAD_NODES) / QUAD_NODES
    fprime = np.zeros_like(f_tab)
    for a, (s, r) in enumerate(zip(s_grid, f_tab)):
        if r == 0.0:
            fprime[a] = 0.0
            continue
        sr = np.sqrt(r)
        dFdr = np.mean(-np.sin(sr * np.sin(tq)) * np.sin(tq)) / (2 * sr)
        dFds = s * (1 + s * s) ** -1.5
        fprime[a] = -dFds / dFdr

    shape = (s_samples, t_samples)
    g1, g2, d1, d2, s1, s2 = (np.zeros(shape) for _ in range(6))
    nco = t_samples // 2 + 1
    c1 = np.zeros((s_samples, nco), dtype=complex)
    c2 = np.zeros((s_samples, nco), dtype=complex)
    for a, (s, r) in enumerate(zip(s_grid, f_tab)):
        row1, row2 = _rows(s, r, t)
        d1[a], d2[a] = row1, row2
        c1[a] = _row_primitive_coeffs(row1)
        c2[a] = _row_primitive_coeffs(row2)
        g1[a] = _eval_coeffs(c1[a], t, t_samples)
        g2[a] = _eval_coeffs(c2[a], t, t_samples)
        # s-derivative of the integrands
        c = np.sqrt(1 + s * s)
        dc = s / c
        ph = np.sqrt(r) * np.sin(t)
        dph = (fprime[a] / (2 * np.sqrt(r)) if r > 0 else 0.0) * np.sin(t)
        ds1 = dc * np.cos(ph) - c * np.sin(ph) * dph
        ds2 = dc * np.sin(ph) + c * np.cos(ph) * dph
        s1[a] = _eval_coeffs(_row_primitive_coeffs(ds1), t, t_samples)
        s2[a] = _eval_coeffs(_row_primitive_coeffs(ds2), t, t_samples)

    # keep the modes that matter anywhere on the table
    mag = np.maximum(np.abs(c1).max(axis=0), np.abs(c2).max(axis=0))
    keep = np.nonzero(mag > 1e-16)[0]
    K = int(keep.max()) + 1 if keep.size else 1
    coef = (
        [CubicSpline(s_grid, c1[:, k].real) for k in range(K)],
        [CubicSpline(s_grid, c1[:, k].imag) for k in range(K)],
        [CubicSpline(s_grid, c2[:, k].real) for k in range(K)],
        [CubicSpline(s_grid, c2[:, k].imag) for k in range(K)],
    )
    return CorrugationProfile(
        s_max=float(s_max), s_grid=s_grid, t_grid=t, f_table=f_tab,
        gamma1=g1, gamma2=g2, dt_gamma1=d1, dt_gamma2=d2, ds_gamma1=s1, ds_gamma2=s2,
        _coef=coef, _f_spline=CubicSpline(s_grid, f_tab), _modes=K,
    )


def _eval_coeffs(c: np.ndarray, t: np.ndarray, m: int) -> np.ndarray:
    return np.fft.irfft(c * m, n=m)


_DEFAULT = None


def default_profile() -> CorrugationProfile:
    """Shared profile with the default range and resolution (built once)."""
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = build_corrugation()
    return _DEFAULT
