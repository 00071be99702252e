import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cforge.errors import DimensionMismatchError, KernelOverlapError, NyquistError, PreconditionError
from cforge.fieldlab import (GridDomain, ImmersionField, MetricField, ScalarField, VectorField, check_nyquist,
                             deficit, differentiate, gradient, holder_seminorm, mollifier_kernel, mollify, norm,
                             pullback_metric, read_snapshot, seminorm, snap_frequency, sup_norm, write_snapshot)


def _sin_field(N=32, period=2.0, n=2):
    dom = GridDomain(n, period, N)
    x = dom.coords()
    return dom, ScalarField(dom, np.sin(2 * np.pi * x[..., 0] / period))


# -------------------------------------------------------------------- domain

@pytest.mark.parametrize("N", [4, 12, 100])
def test_domain_rejects_bad_point_counts(N):
    with pytest.raises(PreconditionError):
        GridDomain(2, 1.0, N)


def test_domain_counts():
    dom = GridDomain(3, 2.0, 16)
    assert dom.size == 16 ** 3 == dom.coords().reshape(-1, 3).shape[0]
    assert dom.spacing == pytest.approx(0.125)


def test_field_shape_mismatch():
    dom = GridDomain(2, 1.0, 8)
    with pytest.raises(DimensionMismatchError):
        ScalarField(dom, np.zeros((8, 16)))
    with pytest.raises(DimensionMismatchError):
        MetricField(dom, np.zeros((8, 8, 3, 3)))


def test_metric_field_symmetrizes():
    dom = GridDomain(2, 1.0, 8)
    vals = np.random.default_rng(0).standard_normal((8, 8, 2, 2))
    m = MetricField(dom, vals)
    assert np.abs(m.values - np.swapaxes(m.values, -1, -2)).max() <= 1e-14


# ---------------------------------------------------------- differentiation

def test_spectral_derivative_of_sine():
    dom, f = _sin_field(32, 2.0)
    w = 2 * np.pi / dom.period
    want = w * np.cos(w * dom.coords()[..., 0])
    assert np.abs(differentiate(f, 1).values - want).max() < 1e-10
    assert np.abs(differentiate(f, 2).values).max() < 1e-10


def test_derivative_of_constant_is_zero():
    dom = GridDomain(2, 1.0, 16)
    c = ScalarField(dom, np.full(dom.shape, 3.7))
    for scheme in ("spectral", "central4"):
        assert np.abs(differentiate(c, 1, scheme).values).max() < 1e-12


def test_central4_is_fourth_order():
    k = 8.0  # half the Nyquist mode count of a 32-point grid on [0, 2 pi)
    errs = []
    for N in (64, 128):
        dom = GridDomain(1, 2 * np.pi, N)
        x = dom.coords()[..., 0]
        d = differentiate(np.sin(k * x), 1, "central4", domain=dom)
        errs.append(np.abs(d - k * np.cos(k * x)).max())
    assert 14.0 <= errs[0] / errs[1] <= 18.0


def test_raw_array_needs_domain():
    with pytest.raises(PreconditionError):
        differentiate(np.zeros(8), 1)


@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_spectral_antiderivative_roundtrip(c):
    # F is a trigonometric polynomial; f = F' in closed form
    dom = GridDomain(2, 2 * np.pi, 16)
    x, y = dom.coords()[..., 0], dom.coords()[..., 1]
    F = c[0] * np.sin(x) + c[1] * np.cos(2 * x) + c[2] * np.sin(x + 3 * y) + c[3] * np.cos(5 * x) + c[4] + c[5] * np.sin(y)
    f = c[0] * np.cos(x) - 2 * c[1] * np.sin(2 * x) + c[2] * np.cos(x + 3 * y) - 5 * c[3] * np.sin(5 * x)
    assert np.abs(differentiate(F, 1, domain=dom) - f).max() < 1e-10


def test_immersion_derivative_includes_linear_part():
    dom = GridDomain(2, 2 * np.pi, 16)
    u = ImmersionField.inclusion(dom, scale=2.0)
    col = differentiate(u, 1)
    assert isinstance(col, VectorField)
    np.testing.assert_allclose(col.values[..., 0], 2.0, atol=1e-13)


# ------------------------------------------------------------- mollification

def test_kernel_mass_is_one():
    for N, ell in ((32, 0.2), (64, 0.05), (16, 0.01)):
        dom = GridDomain(2, 1.0, N)
        assert abs(mollifier_kernel(dom, ell).sum() - 1.0) <= 1e-13


def test_kernel_overlap():
    with pytest.raises(KernelOverlapError):
        mollifier_kernel(GridDomain(2, 1.0, 16), 0.25)


def test_mollify_constant_exact():
    dom = GridDomain(2, 1.0, 32)
    c = ScalarField(dom, np.full(dom.shape, -1.25))
    # unit kernel mass; only FFT rounding remains
    assert np.abs(mollify(c, 0.1).values - c.values).max() <= 1e-14


def test_mollify_sine_error_bound():
    dom, f = _sin_field(64, 2.0)
    ell = dom.period / 64
    err = np.abs(mollify(f, ell).values - f.values).max()
    assert err <= ell * 2 * np.pi / dom.period


def test_mollify_product_estimate():
    dom, f = _sin_field(128, 2.0, n=1)
    ell = dom.period / 16
    lhs = np.abs(mollify(f * f, ell).values - mollify(f, ell).values ** 2).max()
    C = lhs / (ell ** 2 * norm(f, 1) ** 2)
    # measured constant; the kernel has second moment well below 1
    assert 0 < C < 1


@given(st.integers(0, 2 ** 31 - 1), st.floats(0.02, 0.24))
def test_mollify_is_norm_nonincreasing(seed, ell):
    dom = GridDomain(2, 1.0, 16)
    v = np.random.default_rng(seed).standard_normal(dom.shape + (3,))
    f = VectorField(dom, v)
    assert sup_norm(mollify(f, ell)) <= sup_norm(f) * (1 + 1e-12)


def test_mollify_immersion_keeps_linear_part():
    from conftest import graph_immersion

    u = graph_immersion(2, 32)
    m = mollify(u, 0.3)
    assert np.array_equal(m.linear, u.linear)


# ----------------------------------------------------------------- pullback

def test_pullback_inclusion_is_identity():
    dom = GridDomain(3, 1.0, 8)
    g = pullback_metric(ImmersionField.inclusion(dom))
    np.testing.assert_allclose(g.values, np.broadcast_to(np.eye(3), g.values.shape), atol=1e-14)


def test_pullback_scaled():
    dom = GridDomain(2, 1.0, 8)
    g = pullback_metric(ImmersionField.inclusion(dom, scale=0.5))
    np.testing.assert_allclose(g.values, np.broadcast_to(0.25 * np.eye(2), g.values.shape), atol=1e-14)


def test_pullback_graph_closed_form():
    dom = GridDomain(2, 2 * np.pi, 32)
    x = dom.coords()
    e = 0.3
    per = np.zeros(dom.shape + (4,))
    per[..., 2] = e * np.sin(x[..., 0])
    lin = np.zeros((4, 2))
    lin[:2, :2] = np.eye(2)
    g = pullback_metric(ImmersionField.from_periodic(dom, lin, per)).values
    assert np.abs(g[..., 0, 0] - (1 + e ** 2 * np.cos(x[..., 0]) ** 2)).max() < 1e-9
    assert np.abs(g[..., 0, 1]).max() < 1e-12 and np.abs(g[..., 1, 1] - 1).max() < 1e-12


def test_pullback_psd_and_definiteness():
    from conftest import graph_immersion

    ev = pullback_metric(graph_immersion(2, 32)).eigvalsh()
    assert ev.min() > 0
    dom = GridDomain(2, 1.0, 8)
    lin = np.zeros((4, 2))
    lin[0, 0] = 1.0  # rank one
    ev = pullback_metric(ImmersionField.from_periodic(dom, lin, np.zeros(dom.shape + (4,)))).eigvalsh()
    assert ev.min() >= -1e-15 and abs(ev.min()) < 1e-15


def test_deficit_examples():
    dom = GridDomain(2, 1.0, 8)
    eye = MetricField.constant(dom, np.eye(2))
    np.testing.assert_allclose(deficit(eye, ImmersionField.inclusion(dom, scale=0.5)).values,
                               np.broadcast_to(0.75 * np.eye(2), (8, 8, 2, 2)), atol=1e-14)
    assert sup_norm(deficit(eye, ImmersionField.inclusion(dom))) < 1e-14


def test_deficit_operator_vs_frobenius():
    dom = GridDomain(2, 1.0, 8)
    m = MetricField.constant(dom, np.diag([3.0, -4.0]))
    assert sup_norm(m) == pytest.approx(4.0)
    assert sup_norm(m, "frobenius") == pytest.approx(5.0)


# -------------------------------------------------------------------- norms

def test_norms_of_constant():
    dom = GridDomain(2, 1.0, 16)
    c = ScalarField(dom, np.full(dom.shape, -2.5))
    assert norm(c, 0) == pytest.approx(2.5)
    assert seminorm(c, 1) < 1e-12 and seminorm(c, 2) < 1e-12
    assert holder_seminorm(c, 0.5) < 1e-12


def test_first_seminorm_of_sine():
    dom, f = _sin_field(32, 2.0)
    assert seminorm(f, 1) == pytest.approx(2 * np.pi / dom.period, abs=1e-6)


@pytest.mark.parametrize("theta", [0.25, 0.5, 0.75])
def test_holder_estimate_against_closed_form(theta):
    # [sin(kx)]_theta = sup_s 2|sin(ks/2)| / s^theta over torus distances s
    dom, f = _sin_field(256, 2 * np.pi, n=1)
    s = np.linspace(1e-6, np.pi, 200_001)
    exact = float((2 * np.abs(np.sin(s / 2)) / s ** theta).max())
    est = holder_seminorm(f, theta)
    assert est <= exact * (1 + 1e-12)
    assert est >= 0.9 * exact


def test_holder_rejects_bad_theta():
    dom, f = _sin_field(16)
    with pytest.raises(PreconditionError):
        holder_seminorm(f, 1.0)


# ---------------------------------------------------------------- frequencies

def test_nyquist_guard():
    dom = GridDomain(2, 2 * np.pi, 32)  # k h <= pi/4 allows 4 modes
    check_nyquist(dom, 4.0, [1.0, 0.0])
    with pytest.raises(NyquistError):
        check_nyquist(dom, 5.0, [1.0, 0.0])


def test_snap_frequency_lattice():
    dom = GridDomain(2, 2 * np.pi, 32)
    s = 1 / np.sqrt(2)
    assert snap_frequency(dom, 3.2, [1.0, 0.0]) == pytest.approx(3.0)
    assert snap_frequency(dom, 3.0, [s, s]) == pytest.approx(2 * np.sqrt(2))
    assert snap_frequency(dom, 0.01, [1.0, 0.0]) == pytest.approx(1.0)


# ------------------------------------------------------------------ snapshots

def test_snapshot_roundtrip_bit_exact(tmp_path):
    from conftest import graph_immersion

    u = graph_immersion(2, 16)
    write_snapshot(tmp_path / "u.snap", u)
    v = read_snapshot(tmp_path / "u.snap")
    assert isinstance(v, ImmersionField)
    assert v.values.tobytes() == u.values.tobytes() and v.linear.tobytes() == u.linear.tobytes()
    g = pullback_metric(u)
    write_snapshot(tmp_path / "g.snap", g)
    h = read_snapshot(tmp_path / "g.snap")
    assert isinstance(h, MetricField) and h.values.tobytes() == g.values.tobytes()
    s = ScalarField(u.domain, u.values[..., 2])
    write_snapshot(tmp_path / "s.snap", s)
    assert read_snapshot(tmp_path / "s.snap").values.tobytes() == s.values.tobytes()


def test_snapshot_header(tmp_path):
    dom = GridDomain(3, 1.5, 8)
    write_snapshot(tmp_path / "u.snap", ImmersionField.inclusion(dom))
    raw = (tmp_path / "u.snap").read_bytes()
    assert raw[:7] == b"CFORGE1"
    n, d, N, period = np.frombuffer(raw[8:32], "<i8").tolist() + [np.frombuffer(raw[32:40], "<f8")[0]]
    assert (n, d, N, period) == (3, 6, 8, 1.5)


def test_snapshot_bad_magic(tmp_path):
    (tmp_path / "x.snap").write_bytes(b"NOTASNAP" + bytes(64))
    with pytest.raises(PreconditionError):
        read_snapshot(tmp_path / "x.snap")
