"""Shared fixtures and the acceptance summary hook."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cforge.fieldlab import GridDomain, ImmersionField
from cforge.symcore import build_basis

settings.register_profile("cforge", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("cforge")

# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def basis2():
    return build_basis(2)


@pytest.fixture(scope="session")
def basis3():
    return build_basis(3)


def graph_immersion(n: int, N: int, period: float = 2 * np.pi, amp: float = 0.3) -> ImmersionField:
    """``x -> (x, phi(x))`` with a smooth periodic ``phi`` in the first two normal slots."""
    dom = GridDomain(n, period, N)
    x = dom.coords()
    w = 2 * np.pi / period
    per = np.zeros(dom.shape + (2 * n,))
    per[..., n] = amp / w * np.sin(w * x[..., 0]) * np.cos(w * x[..., 1])
    per[..., n + 1] = 0.7 * amp / w * np.cos(w * (x[..., 0] + x[..., 1]))
    lin = np.zeros((2 * n, n))
    lin[:n, :n] = np.eye(n)
    return ImmersionField.from_periodic(dom, lin, per)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
