"""Fields on a periodic uniform grid.

The box is realized as a flat torus of side ``period`` with
``points_per_axis`` samples per axis.  Field values are plain ndarrays with
the grid axes first, followed by the codomain axes:

* scalar fields ``(N,)*n``
* vector fields ``(N,)*n + (d,)``
* metric fields ``(N,)*n + (n, n)``

Immersions are not periodic (the inclusion ``x -> (x, 0)`` grows linearly),
so :class:`ImmersionField` stores the full sampled values together with a
constant linear part ``A``; the difference ``u(x) - A x`` is periodic and
is what gets differentiated and mollified.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, KernelOverlapError, NyquistError, PreconditionError
from .symcore import sym

__all__ = [
    "GridDomain",
    "ScalarField",
    "VectorField",
    "MetricField",
    "ImmersionField",
    "differentiate",
    "gradient",
    "hessian",
    "mollify",
    "mollifier_kernel",
    "pullback_metric",
    "deficit",
    "sup_norm",
    "seminorm",
    "norm",
    "holder_seminorm",
    "snap_frequency",
    "check_nyquist",
    "write_snapshot",
    "read_snapshot",
    "NYQUIST_LIMIT",
]

NYQUIST_LIMIT = np.pi / 4
MAGIC = b"CFORGE1\x00"


@dataclass(frozen=True)
class GridDomain:
    """Uniform periodic grid on the box ``[0, period)^n``."""

    n: int
    period: float
    points_per_axis: int

    def __post_init__(self):
        N = self.points_per_axis
        if self.n < 1:
            raise PreconditionError("grid dimension must be positive")
        if N < 8 or N & (N - 1):
            raise PreconditionError(f"points_per_axis must be a power of two >= 8, got {N}")
        if not self.period > 0:
            raise PreconditionError("period must be positive")

    @property
    def spacing(self) -> float:
        return self.period / self.points_per_axis

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.n

    @property
    def size(self) -> int:
        return self.points_per_axis ** self.n

    @property
    def base_frequency(self) -> float:
        return 2.0 * np.pi / self.period

    def axis(self) -> np.ndarray:
        return np.arange(self.points_per_axis) * self.spacing

    def coords(self) -> np.ndarray:
        """Grid points, shape ``shape + (n,)``."""
        ax = self.axis()
        mesh = np.meshgrid(*([ax] * self.n), indexing="ij")
        return np.stack(mesh, axis=-1)

    def coordinate(self, k: int) -> np.ndarray:
        """The ``k``-th coordinate (0-based) broadcastable against the grid."""
        shape = [1] * self.n
        shape[k] = self.points_per_axis
        return self.axis().reshape(shape)

    def phase(self, direction: np.ndarray, lam: float) -> np.ndarray:
        """``lam * x . direction`` on the grid."""
        out = np.zeros(self.shape)
        for k, c in enumerate(np.asarray(direction, dtype=float)):
            if c != 0.0:
                out = out + lam * c * self.coordinate(k)
        return out

    def wavenumbers(self) -> np.ndarray:
        return np.fft.fftfreq(self.points_per_axis, d=self.spacing) * 2.0 * np.pi


class _Field:
    trailing_ndim = 0

    def __init__(self, domain: GridDomain, values):
        values = np.asarray(values, dtype=float)
        if values.shape[: domain.n] != domain.shape:
            raise DimensionMismatchError(f"values of shape {values.shape} do not match grid {domain.shape}")
        self.domain = domain
        self.values = values

    @property
    def trailing_shape(self) -> tuple[int, ...]:
        return self.values.shape[self.domain.n:]

    def _new(self, values):
        return type(self)(self.domain, values)

    def __add__(self, other):
        return self._new(self.values + _vals(other))

    def __sub__(self, other):
        return self._new(self.values - _vals(other))

    def __mul__(self, c):
        return self._new(self.values * _vals(c))

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self._new(self.values / _vals(c))

    def __neg__(self):
        return self._new(-self.values)

    def __repr__(self):
        return f"{type(self).__name__}(shape={self.values.shape})"


def _vals(x):
    return x.values if isinstance(x, _Field) else x


class ScalarField(_Field):
    pass


class VectorField(_Field):
    @property
    def d(self) -> int:
        return self.values.shape[-1]


class MetricField(_Field):
    """Symmetric matrix field, symmetrized on construction."""

    def __init__(self, domain: GridDomain, values, positive_definite: bool = False):
        super().__init__(domain, values)
        if self.values.shape[domain.n:] != (domain.n, domain.n):
            raise DimensionMismatchError(f"metric field needs trailing shape ({domain.n}, {domain.n})")
        self.values = sym(self.values)
        if positive_definite:
            lo = np.linalg.eigvalsh(self.values).min()
            if not lo > 0:
                raise PreconditionError(f"metric flagged positive definite has min eigenvalue {lo:.3e}")
        self.positive_definite = positive_definite

    def _new(self, values):
        return MetricField(self.domain, values)

    @classmethod
    def constant(cls, domain: GridDomain, m) -> "MetricField":
        m = np.asarray(m, dtype=float)
        return cls(domain, np.broadcast_to(m, domain.shape + m.shape).copy())

    def eigvalsh(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.values)


class ImmersionField:
    """A map from the torus cover into ``R^d`` of the form ``A x + periodic``.

    Parameters
    ----------
    domain : GridDomain
    values : ndarray, shape ``domain.shape + (d,)``
        Full samples ``u(x)`` at the grid points.
    linear : ndarray, shape (d, n)
        Constant linear part ``A``; ``u(x) - A x`` must be periodic.
    """

    def __init__(self, domain: GridDomain, values, linear, scheme: str = "spectral"):
        values = np.asarray(values, dtype=float)
        linear = np.asarray(linear, dtype=float)
        if values.shape[: domain.n] != domain.shape or values.ndim != domain.n + 1:
            raise DimensionMismatchError("immersion samples do not match the grid")
        if linear.shape != (values.shape[-1], domain.n):
            raise DimensionMismatchError(f"linear part must have shape ({values.shape[-1]}, {domain.n})")
        self.domain = domain
        self.values = values
        self.linear = linear
        self.scheme = scheme

    @property
    def d(self) -> int:
        return self.values.shape[-1]

    @classmethod
    def from_periodic(cls, domain: GridDomain, linear, periodic) -> "ImmersionField":
        linear = np.asarray(linear, dtype=float)
        return cls(domain, np.asarray(periodic, dtype=float) + domain.coords() @ linear.T, linear)

    @classmethod
    def inclusion(cls, domain: GridDomain, d: int | None = None, scale: float = 1.0) -> "ImmersionField":
        """``x -> scale * (x, 0)`` into ``R^d`` (default ``d = 2n``)."""
        n = domain.n
        d = 2 * n if d is None else d
        lin = np.zeros((d, n))
        lin[:n, :n] = scale * np.eye(n)
        return cls.from_periodic(domain, lin, np.zeros(domain.shape + (d,)))

    def linear_values(self) -> np.ndarray:
        return self.domain.coords() @ self.linear.T

    @cached_property
    def periodic(self) -> np.ndarray:
        return self.values - self.linear_values()

    @cached_property
    def jacobian(self) -> np.ndarray:
        """``du/dx``, shape ``shape + (d, n)``."""
        return self.linear + gradient(self.domain, self.periodic, self.scheme)

    def with_values(self, values) -> "ImmersionField":
        return ImmersionField(self.domain, values, self.linear, self.scheme)

    def add_periodic(self, delta) -> "ImmersionField":
        return self.with_values(self.values + delta)

    def __repr__(self):
        return f"ImmersionField(shape={self.values.shape})"


# --------------------------------------------------------------------------
# differentiation


def _spectral_axis(domain: GridDomain, f: np.ndarray, axis: int) -> np.ndarray:
    N = domain.points_per_axis
    fh = np.fft.rfft(f, axis=axis)
    k = np.fft.rfftfreq(N, d=domain.spacing) * 2.0 * np.pi
    k[-1] = 0.0  # Nyquist mode carries no derivative information
    shape = [1] * f.ndim
    shape[axis] = k.size
    return np.fft.irfft(fh * (1j * k.reshape(shape)), n=N, axis=axis)


def _central4_axis(domain: GridDomain, f: np.ndarray, axis: int) -> np.ndarray:
    h = domain.spacing
    return (-np.roll(f, -2, axis) + 8 * np.roll(f, -1, axis) - 8 * np.roll(f, 1, axis) + np.roll(f, 2, axis)) / (12 * h)


def _diff_array(domain: GridDomain, f: np.ndarray, axis: int, scheme: str) -> np.ndarray:
    if scheme == "spectral":
        return _spectral_axis(domain, f, axis)
    if scheme == "central4":
        return _central4_axis(domain, f, axis)
    raise PreconditionError(f"unknown differentiation scheme {scheme!r}")


def differentiate(f, axis: int, scheme: str = "spectral", domain: GridDomain | None = None):
    """Partial derivative along ``axis`` (1-based).

    Accepts field objects (returning the same kind; an immersion yields its
    Jacobian column as a :class:`VectorField`) or raw arrays with an
    explicit ``domain``.
    """
    if isinstance(f, ImmersionField):
        dom = f.domain
        col = f.linear[:, axis - 1] + _diff_array(dom, f.periodic, axis - 1, scheme)
        return VectorField(dom, col)
    if isinstance(f, _Field):
        out = _diff_array(f.domain, f.values, axis - 1, scheme)
        return MetricField(f.domain, out) if isinstance(f, MetricField) else type(f)(f.domain, out)
    if domain is None:
        raise PreconditionError("raw arrays need an explicit domain")
    return _diff_array(domain, np.asarray(f, dtype=float), axis - 1, scheme)


def gradient(domain: GridDomain, f: np.ndarray, scheme: str = "spectral") -> np.ndarray:
    """All first partials of a periodic array; appends an axis of length n."""
    out = np.empty(f.shape + (domain.n,))
    for k in range(domain.n):
        out[..., k] = _diff_array(domain, f, k, scheme)
    return out


def hessian(domain: GridDomain, f: np.ndarray, scheme: str = "spectral") -> np.ndarray:
    """All second partials; appends two axes of length n."""
    g = gradient(domain, f, scheme)
    return np.stack([_diff_array(domain, g, k, scheme) for k in range(domain.n)], axis=-1)


# --------------------------------------------------------------------------
# mollification


def mollifier_kernel(domain: GridDomain, ell: float) -> np.ndarray:
    """Periodic samples of the normalized bump of radius ``ell``.

    The kernel is ``exp(-1 / (1 - |x/ell|^2))`` inside the ball, zero
    outside, normalized to unit discrete mass.  A radius below one grid
    spacing degenerates to the identity.
    """
    if not ell > 0:
        raise PreconditionError("mollification length must be positive")
    if ell >= domain.period / 4:
        raise KernelOverlapError(f"ell={ell:g} must be below period/4={domain.period / 4:g}")
    N = domain.points_per_axis
    idx = np.arange(N)
    off = np.minimum(idx, N - idx) * domain.spacing
    r2 = np.zeros(domain.shape)
    for k in range(domain.n):
        shape = [1] * domain.n
        shape[k] = N
        r2 = r2 + (off.reshape(shape) / ell) ** 2
    ker = np.zeros(domain.shape)
    inside = r2 < 1.0
    ker[inside] = np.exp(-1.0 / (1.0 - r2[inside]))
    total = ker.sum()
    if total == 0.0 or inside.sum() == 1:
        ker = np.zeros(domain.shape)
        ker[(0,) * domain.n] = 1.0
        return ker
    return ker / total


def _convolve(domain: GridDomain, f: np.ndarray, ker: np.ndarray) -> np.ndarray:
    axes = tuple(range(domain.n))
    kh = np.fft.rfftn(ker, axes=axes)
    fh = np.fft.rfftn(f, axes=axes)
    extra = f.ndim - domain.n
    kh = kh.reshape(kh.shape + (1,) * extra)
    return np.fft.irfftn(fh * kh, s=domain.shape, axes=axes)


def mollify(f, ell: float):
    """Convolution with the bump kernel of radius ``ell``.

    Works on field objects and immersions (only the periodic part is
    convolved; the symmetric kernel leaves ``A x`` unchanged).
    """
    if isinstance(f, ImmersionField):
        ker = mollifier_kernel(f.domain, ell)
        per = _convolve(f.domain, f.periodic, ker)
        return ImmersionField.from_periodic(f.domain, f.linear, per)
    ker = mollifier_kernel(f.domain, ell)
    out = _convolve(f.domain, f.values, ker)
    return f._new(out)


# --------------------------------------------------------------------------
# metrics


def pullback_metric(u: ImmersionField) -> MetricField:
    """``(du)^T du`` at every grid point."""
    J = u.jacobian
    return MetricField(u.domain, np.einsum("...ia,...ib->...ab", J, J))


def deficit(g: MetricField, u: ImmersionField) -> MetricField:
    """``g - u^# e``."""
    if g.domain != u.domain:
        raise DimensionMismatchError("metric and immersion live on different grids")
    return MetricField(g.domain, g.values - pullback_metric(u).values)


# --------------------------------------------------------------------------
# norms


def _pointwise_abs(vals: np.ndarray, n_grid: int, matrix_norm: str = "operator") -> np.ndarray:
    trail = vals.ndim - n_grid
    if trail == 0:
        return np.abs(vals)
    if trail == 1:
        return np.linalg.norm(vals, axis=-1)
    if trail == 2 and matrix_norm == "operator":
        if vals.shape[-1] == vals.shape[-2] and np.allclose(vals, np.swapaxes(vals, -1, -2)):
            return np.abs(np.linalg.eigvalsh(vals)).max(axis=-1)
        return np.linalg.norm(vals, ord=2, axis=(-2, -1))
    return np.sqrt((vals.reshape(vals.shape[:n_grid] + (-1,)) ** 2).sum(axis=-1))


def sup_norm(f, matrix_norm: str = "operator") -> float:
    """Maximum over grid points of the pointwise norm.

    Scalars use ``|.|``, vectors the Euclidean norm and matrices the operator
    norm (or ``matrix_norm='frobenius'``).
    """
    if isinstance(f, ImmersionField):
        return float(_pointwise_abs(f.values, f.domain.n).max())
    return float(_pointwise_abs(f.values, f.domain.n, matrix_norm).max())


def _field_values(f) -> tuple[GridDomain, np.ndarray, np.ndarray | None]:
    if isinstance(f, ImmersionField):
        return f.domain, f.periodic, f.linear
    return f.domain, f.values, None


def seminorm(f, order: int, scheme: str = "spectral") -> float:
    """``[f]_k``: sum over multi-indices of order ``k`` of the sup-norm of the partial.

    Pointwise norms are Euclidean over the codomain entries.
    """
    dom, vals, lin = _field_values(f)
    if order == 0:
        if lin is not None:
            return sup_norm(f)
        return float(_pointwise_abs(vals, dom.n, "frobenius").max())
    total = 0.0
    for beta in combinations_with_replacement(range(dom.n), order):
        d = vals
        for ax in beta:
            d = _diff_array(dom, d, ax, scheme)
        if lin is not None and order == 1:
            d = d + lin[:, beta[0]]
        total += float(_pointwise_abs(d, dom.n, "frobenius").max())
    return total


def norm(f, order: int, scheme: str = "spectral") -> float:
    """``||f||_k = sum_{j <= k} [f]_j``."""
    if order not in (0, 1, 2):
        raise PreconditionError("norm order must be 0, 1 or 2")
    return sum(seminorm(f, j, scheme) for j in range(order + 1))


def holder_seminorm(f, theta: float, derivative_order: int = 0, scheme: str = "spectral") -> float:
    """Dyadic lower estimate of ``[f]_{k + theta}``.

    Difference quotients ``|D f(x + s e_a) - D f(x)| / s^theta`` are
    maximized over axis shifts of ``2^j`` grid spacings (torus distance),
    and summed over multi-indices ``D`` of order ``k``.  This is an estimate
    from below, not a certified norm.
    """
    if not 0 < theta < 1:
        raise PreconditionError("theta must lie in (0, 1)")
    dom, vals, lin = _field_values(f)
    N = dom.points_per_axis
    shifts = []
    s = 1
    while s <= N // 2:
        shifts.append(s)
        s *= 2
    total = 0.0
    for beta in combinations_with_replacement(range(dom.n), derivative_order):
        d = vals
        for ax in beta:
            d = _diff_array(dom, d, ax, scheme)
        best = 0.0
        for ax in range(dom.n):
            for s in shifts:
                diff = np.roll(d, -s, axis=ax) - d
                if lin is not None and derivative_order == 0:
                    diff = diff + lin[:, ax] * (s * dom.spacing)
                q = _pointwise_abs(diff, dom.n, "frobenius").max() / (s * dom.spacing) ** theta
                best = max(best, float(q))
        total += best
    return total


# --------------------------------------------------------------------------
# frequencies


def snap_frequency(domain: GridDomain, lam: float, direction) -> float:
    """Nearest frequency ``lam'`` with ``lam' * direction`` on the dual lattice.

    ``direction`` must have entries that are integer multiples of its
    smallest nonzero entry (true for every primitive direction).  The result
    is at least one lattice step.
    """
    direction = np.asarray(direction, dtype=float)
    c = np.min(np.abs(direction[direction != 0]))
    step = domain.base_frequency / c
    m = max(1, int(round(lam / step)))
    return m * step


def check_nyquist(domain: GridDomain, lam: float, direction, limit: float = NYQUIST_LIMIT) -> None:
    """Raise :class:`NyquistError` when ``lam * direction`` is under-resolved."""
    kmax = lam * np.max(np.abs(np.asarray(direction, dtype=float)))
    if kmax * domain.spacing > limit * (1 + 1e-12):
        raise NyquistError(
            f"frequency {lam:.6g} along {np.round(direction, 4).tolist()} gives "
            f"k*h = {kmax * domain.spacing:.4f} > {limit:.4f}"
        )


# --------------------------------------------------------------------------
# snapshots


def write_snapshot(path, field) -> None:
    """Write a field to the binary snapshot format.

    Layout (little-endian): 8-byte magic ``CFORGE1\\0``; int64 ``n``, ``d``,
    ``points_per_axis``; float64 ``period``; float64 samples in row-major
    order (grid axes, then components); then an optional trailer tag
    ``IMMR`` followed by the ``d x n`` linear part (immersions) or ``METR``
    (metric fields).
    """
    if isinstance(field, ImmersionField):
        dom, vals, d = field.domain, field.values, field.d
    else:
        dom, vals = field.domain, field.values
        d = int(np.prod(field.trailing_shape)) if field.trailing_shape else 1
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<qqqd", dom.n, d, dom.points_per_axis, float(dom.period)))
        fh.write(np.ascontiguousarray(vals, dtype="<f8").tobytes())
        if isinstance(field, ImmersionField):
            fh.write(b"IMMR")
            fh.write(np.ascontiguousarray(field.linear, dtype="<f8").tobytes())
        elif isinstance(field, MetricField):
            fh.write(b"METR")


def read_snapshot(path):
    """Inverse of :func:`write_snapshot`; returns the matching field type."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise PreconditionError(f"{path}: not a snapshot file")
    n, d, N, period = struct.unpack("<qqqd", raw[8:40])
    dom = GridDomain(int(n), float(period), int(N))
    count = dom.size * d
    body = np.frombuffer(raw, dtype="<f8", count=count, offset=40).astype(float)
    rest = raw[40 + 8 * count:]
    if rest[:4] == b"IMMR":
        lin = np.frombuffer(rest, dtype="<f8", count=d * n, offset=4).astype(float).reshape(d, n)
        return ImmersionField(dom, body.reshape(dom.shape + (d,)), lin)
    if rest[:4] == b"METR":
        return MetricField(dom, body.reshape(dom.shape + (n, n)))
    if d == 1:
        return ScalarField(dom, body.reshape(dom.shape))
    return VectorField(dom, body.reshape(dom.shape + (d,)))
