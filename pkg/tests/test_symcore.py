import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cforge.errors import DimensionMismatchError, InvalidDimensionError, PreconditionError, SingularMapError
from cforge.symcore import (apply_phi, build_basis, estimate_sigma_star, phi_condition, phi_matrix, project_L,
                            reconstruct, sigma_star_bound, smat, solve_phi, svec, sym)

BASES = {n: build_basis(n) for n in range(2, 7)}


def _sym_from(a):
    return 0.5 * (a + a.T)


sym_entries = st.floats(-1.0, 1.0, allow_nan=False, allow_infinity=False)


def sym_matrices(n):
    return arrays(np.float64, (n, n), elements=sym_entries).map(_sym_from)


# ---------------------------------------------------------------- build_basis

def test_basis_n2_directions_and_h_star():
    B = BASES[2]
    s = 1 / np.sqrt(2)
    np.testing.assert_allclose(B.xi, [[1, 0], [0, 1], [s, s]], atol=1e-15)
    # e1 e1 + e2 e2 + (e1+e2)(e1+e2)/2 summed by hand
    np.testing.assert_allclose(B.h_star, [[1.5, 0.5], [0.5, 1.5]], atol=1e-15)


def test_basis_n3_h_star_entries():
    B = BASES[3]
    assert B.n_star == 6
    np.testing.assert_allclose(np.diag(B.h_star), 2.0, atol=1e-15)
    off = B.h_star[~np.eye(3, dtype=bool)]
    np.testing.assert_allclose(off, 0.5, atol=1e-15)


def test_basis_order_is_lexicographic():
    B = BASES[4]
    pairs = []
    for v in B.xi[4:]:
        nz = np.nonzero(v)[0]
        pairs.append(tuple(nz))
    assert pairs == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


@pytest.mark.parametrize("n", [1, 0, 2.5])
def test_basis_rejects_bad_dimension(n):
    with pytest.raises(InvalidDimensionError):
        build_basis(n)


def test_basis_is_immutable():
    with pytest.raises(ValueError):
        BASES[3].xi[0, 0] = 2.0


# ------------------------------------------------------------------ project_L

@pytest.mark.parametrize("n", range(2, 7))
def test_project_L_of_h_star_is_all_ones(n):
    np.testing.assert_allclose(project_L(BASES[n], BASES[n].h_star), 1.0, atol=1e-13)


@pytest.mark.parametrize("n", range(2, 7))
def test_project_L_of_basis_element(n):
    B = BASES[n]
    for k in range(B.n_star):
        c = project_L(B, np.outer(B.xi[k], B.xi[k]))
        np.testing.assert_allclose(c, np.eye(B.n_star)[k], atol=1e-13)


def test_project_L_random_n3_roundtrip(rng):
    B = BASES[3]
    h = rng.uniform(-1, 1, size=(500, 3, 3))
    h = sym(h)
    res = np.linalg.norm(reconstruct(B, project_L(B, h)) - h, axis=(-2, -1))
    assert res.max() < 1e-11


def test_project_L_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        project_L(BASES[3], np.eye(2))


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(st.just(n), sym_matrices(n), sym_matrices(n),
                                                      st.floats(-3, 3), st.floats(-3, 3))))
def test_project_L_is_linear(args):
    n, h1, h2, a, b = args
    B = BASES[n]
    lhs = project_L(B, a * h1 + b * h2)
    rhs = a * project_L(B, h1) + b * project_L(B, h2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-11)


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(st.just(n), sym_matrices(n))))
def test_reconstruction_is_exact(args):
    n, h = args
    B = BASES[n]
    r = np.linalg.norm(reconstruct(B, project_L(B, h)) - h)
    assert r <= 1e-11 * (1 + np.linalg.norm(h))


# ----------------------------------------------------------------- sigma_star

@pytest.mark.parametrize("n", range(2, 7))
def test_sigma_star_in_range_and_below_exact_bound(n):
    B = BASES[n]
    assert 0 < B.sigma_star < 1
    # an independent closed form of the optimal margin
    assert B.sigma_star <= sigma_star_bound(B)
    assert B.sigma_0 == pytest.approx(np.sqrt(B.sigma_star) / 2, rel=1e-15)


def test_sigma_star_is_deterministic():
    assert estimate_sigma_star(BASES[3]) == estimate_sigma_star(BASES[3])


def test_sigma_star_rejects_few_samples():
    with pytest.raises(PreconditionError):
        estimate_sigma_star(BASES[2], samples=0)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_positivity_margin_holds_on_fresh_samples(n):
    B = BASES[n]
    rng = np.random.default_rng(777 + n)
    H = sym(rng.standard_normal((10_000, n, n)))
    H /= np.linalg.norm(H, axis=(-2, -1), keepdims=True)
    r = 2 * B.sigma_star * rng.uniform(size=10_000) ** (1 / B.n_star)
    h = B.h_star + r[:, None, None] * H
    assert project_L(B, h).min() >= B.sigma_star


# ---------------------------------------------------------------------- Phi_i

def test_solve_phi_zero():
    al, be = solve_phi(BASES[3], 2, 1.0, np.zeros((3, 3)))
    assert not al.any() and not be.any()


@pytest.mark.parametrize("c_star", [1.0, -0.5, 3.0])
def test_solve_phi_direct_image(c_star):
    B = BASES[3]
    v = np.array([0.3, -1.2, 0.7])
    M = c_star * 0.5 * (np.outer(v, B.xi[0]) + np.outer(B.xi[0], v))
    al, be = solve_phi(B, 1, c_star, M)
    np.testing.assert_allclose(al, v, atol=1e-13)
    np.testing.assert_allclose(be, 0.0, atol=1e-13)


def test_solve_phi_singular():
    with pytest.raises(SingularMapError):
        solve_phi(BASES[3], 1, 0.0, np.eye(3))


def test_solve_phi_bad_index():
    with pytest.raises(PreconditionError):
        solve_phi(BASES[3], 4, 1.0, np.eye(3))


@given(st.integers(2, 6).flatmap(lambda n: st.tuples(st.just(n), st.integers(1, n), sym_matrices(n))))
def test_phi_roundtrip(args):
    n, i, M = args
    B = BASES[n]
    al, be = solve_phi(B, i, 1.0, M)
    r = np.linalg.norm(apply_phi(B, i, 1.0, al, be) - M)
    assert r <= 1e-11 * (1 + np.linalg.norm(M))


@pytest.mark.parametrize("n", range(2, 7))
def test_phi_condition_finite(n):
    B = BASES[n]
    for i in range(1, n + 1):
        kappa = phi_condition(B, i)
        assert np.isfinite(kappa) and kappa >= 1
        assert phi_matrix(B, i).shape == (B.n_star, B.n_star)


def test_svec_is_isometric(rng):
    a = sym(rng.standard_normal((4, 4)))
    b = sym(rng.standard_normal((4, 4)))
    assert svec(a) @ svec(b) == pytest.approx(np.sum(a * b), rel=1e-13)
    np.testing.assert_allclose(smat(svec(a), 4), a, atol=1e-14)
