import numpy as np
import pytest
from conftest import graph_immersion
from hypothesis import given
from hypothesis import strategies as st

from cforge.errors import DegenerateImmersionError, PreconditionError
from cforge.fieldlab import GridDomain, ImmersionField
from cforge.frames import build_frame, frame_residuals, tangential_correction


@pytest.mark.parametrize("n", [2, 3])
def test_inclusion_frame_spans_normal_coordinates(n):
    u = ImmersionField.inclusion(GridDomain(n, 1.0, 8))
    fr = build_frame(u)
    assert fr.count == n
    proj = np.linalg.norm(fr.vectors[..., n:], axis=-1)
    assert np.abs(proj - 1).max() <= 1e-12
    assert max(frame_residuals(fr)) <= 1e-10


@pytest.mark.parametrize("n,N", [(2, 64), (3, 16), (4, 8)])
def test_graph_frame_residuals(n, N):
    fr = build_frame(graph_immersion(n, N))
    orth, normal = frame_residuals(fr)
    assert orth <= 1e-10 and normal <= 1e-10


def test_constant_map_is_degenerate():
    dom = GridDomain(2, 1.0, 8)
    u = ImmersionField(dom, np.zeros(dom.shape + (4,)), np.zeros((4, 2)))
    with pytest.raises(DegenerateImmersionError):
        build_frame(u)
    with pytest.raises(DegenerateImmersionError):
        tangential_correction(u)


def test_metric_outside_gamma_bound():
    u = ImmersionField.inclusion(GridDomain(2, 1.0, 8), scale=40.0)
    with pytest.raises(DegenerateImmersionError):
        build_frame(u, gamma_bound=1e3)
    with pytest.raises(PreconditionError):
        build_frame(u, gamma_bound=1.0)


def test_frame_is_deterministic():
    u = graph_immersion(2, 32)
    assert build_frame(u).vectors.tobytes() == build_frame(u).vectors.tobytes()


def test_degenerate_default_pivots_fall_back():
    # the tangent plane contains e_3, the first default candidate
    dom = GridDomain(2, 2 * np.pi, 16)
    lin = np.zeros((4, 2))
    lin[2, 0] = 1.0
    lin[1, 1] = 1.0
    fr = build_frame(ImmersionField.from_periodic(dom, lin, np.zeros(dom.shape + (4,))))
    assert max(frame_residuals(fr)) <= 1e-10


def test_frame_smoothness_is_stable_under_refinement():
    vals = []
    for N in (32, 64, 128):
        fr = build_frame(graph_immersion(2, N), measure_smoothness=True)
        vals.append(fr.smoothness)
    assert all(np.isfinite(vals))
    for a, b in zip(vals, vals[1:]):
        assert b / a <= 1.1


def test_tangential_correction_examples():
    dom = GridDomain(3, 1.0, 8)
    u = ImmersionField.inclusion(dom)
    np.testing.assert_allclose(tangential_correction(u), u.jacobian, atol=1e-14)
    u2 = ImmersionField.inclusion(dom, scale=2.0)
    F = tangential_correction(u2)
    np.testing.assert_allclose(F, 0.5 * u.jacobian, atol=1e-14)
    np.testing.assert_allclose(np.einsum("...ia,...ib->...ab", u2.jacobian, F), np.broadcast_to(np.eye(3), F.shape[:-2] + (3, 3)),
                               atol=1e-14)


def test_tangential_correction_random_immersion():
    u = graph_immersion(3, 16, amp=0.6)
    F = tangential_correction(u)
    res = np.einsum("...ia,...ib->...ab", u.jacobian, F) - np.eye(3)
    assert np.abs(res).max() < 1e-10


@given(st.integers(0, 2 ** 31 - 1))
def test_tangential_correction_acts_as_identity(seed):
    u = graph_immersion(2, 16, amp=0.5)
    F = tangential_correction(u)
    rng = np.random.default_rng(seed)
    xi, v = rng.standard_normal(2), rng.standard_normal(2)
    lhs = np.einsum("a,...ia,...ib,b->...", xi, u.jacobian, F, v)
    assert np.abs(lhs - xi @ v).max() <= 1e-10 * (1 + abs(xi @ v))
