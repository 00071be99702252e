"""Property suites run by ``cforge verify``.

Each check returns ``(ok, detail)``.  The ``fast`` suite covers the exact
algebraic identities on small grids; ``full`` adds the scaling regressions.
"""

from __future__ import annotations

import numpy as np

from .audit import audit_exponents, stage_index_bisect, stage_index_threshold
from .decomp import kallen_decompose, newton_decompose, oscillatory_reduce
from .fieldlab import GridDomain, ImmersionField, MetricField, pullback_metric, sup_norm
from .frames import build_frame, frame_residuals
from .profiles import PeriodicProfile, default_profile, solve_f
from .stage import corrugation_round, make_global_params, make_schedule, spiral_step
from .symcore import apply_phi, build_basis, project_L, reconstruct, solve_phi

__all__ = ["SUITES"]


def _rand_sym(rng, n, count):
    a = rng.uniform(-1, 1, size=(count, n, n))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_project_L():
    rng = np.random.default_rng(1)
    worst = 0.0
    for n in range(2, 7):
        B = build_basis(n)
        h = _rand_sym(rng, n, 1000)
        r = np.linalg.norm(reconstruct(B, project_L(B, h)) - h, axis=(-2, -1)).max()
        worst = max(worst, float(r))
    return worst <= 1e-11, f"max residual {worst:.2e}"


def check_phi():
    rng = np.random.default_rng(2)
    worst = 0.0
    for n in range(2, 7):
        B = build_basis(n)
        M = _rand_sym(rng, n, 200)
        for i in range(1, n + 1):
            al, be = solve_phi(B, i, 1.0, M)
            worst = max(worst, float(np.abs(apply_phi(B, i, 1.0, al, be) - M).max()))
    return worst <= 1e-11, f"max residual {worst:.2e}"


def check_profile():
    p = default_profile()
    ident = p.identity_residual()
    ratio = solve_f(1e-3) / (2e-6)
    ok = ident <= 1e-9 and 0.98 <= ratio <= 1.02
    return ok, f"identity {ident:.2e}, f(s)/2s^2 at 1e-3 = {ratio:.6f}"


def check_audit_grid():
    worst = np.inf
    bad = []
    for n in (3, 4, 5, 6):
        for eps in (0.001, 0.005, 0.01, 0.02):
            rep = audit_exponents(n, eps)
            worst = min(worst, rep.binding().margin)
            if not rep.passed or rep.binding().margin <= 1e-8:
                bad.append((n, eps))
            if stage_index_threshold((n, eps, n * (n + 1) // 2)) != stage_index_bisect((n, eps, n * (n + 1) // 2)):
                bad.append((n, eps, "threshold"))
    return not bad, f"smallest margin {worst:.3e}" + (f", failing {bad}" if bad else "")


def check_schedule():
    gp = make_global_params(3, 0.02, 1.0, 50.0)
    worst = 0.0
    for m in range(3):
        s = make_schedule(gp, m)
        d0 = gp.delta_star * gp.a ** (-2 * gp.vartheta * gp.b ** m)
        d1 = gp.delta_star * gp.a ** (-2 * gp.vartheta * gp.b ** (m + 1))
        d2 = gp.delta_star * gp.a ** (-2 * gp.vartheta * gp.b ** (m + 2))
        lam = gp.lambda_star * gp.a ** (gp.b ** (m + 1) + gp.tau)
        ell = d1 ** 0.5 / (d0 ** 0.5 * lam * gp.a ** gp.alpha)
        for got, want in ((s.delta_m, d0), (s.delta_m1, d1), (s.lambda_m, lam), (s.ell, ell),
                          (s.Lambda, d1 * gp.a ** gp.alpha / d2), (s.lambda_steps[0], 1 / ell)):
            worst = max(worst, abs(got - want) / abs(want))
    return worst <= 1e-12, f"max relative deviation {worst:.2e}"


def _graph(n=2, N=16):
    dom = GridDomain(n, 2 * np.pi, N)
    x = dom.coords()
    per = np.zeros(dom.shape + (2 * n,))
    per[..., n] = 0.3 * np.sin(x[..., 0]) * np.cos(x[..., 1])
    per[..., n + 1] = 0.2 * np.cos(x[..., 0] + x[..., 1])
    lin = np.zeros((2 * n, n))
    lin[:n, :n] = np.eye(n)
    return ImmersionField.from_periodic(dom, lin, per)


def check_frames():
    worst = 0.0
    for u in (_graph(2, 32), _graph(3, 16), ImmersionField.inclusion(GridDomain(3, 1.0, 8))):
        orth, normal = frame_residuals(build_frame(u))
        worst = max(worst, orth, normal)
    return worst <= 1e-10, f"max residual {worst:.2e}"


def check_spiral_flat():
    dom = GridDomain(3, np.pi / 2, 32)
    B = build_basis(3)
    u = ImmersionField.inclusion(dom)
    delta = 0.01
    worst = 0.0
    for i in (1, 2, 3):
        r = spiral_step(u, 0.8, i, 16.0, delta, mu=8.0, basis=B)
        res = r.increment - delta * 0.64 * np.outer(B.xi[i - 1], B.xi[i - 1])
        worst = max(worst, sup_norm(MetricField(dom, res)) / delta)
    return worst <= 1e-6, f"max residual / delta {worst:.2e}"


def check_corrugation_flat():
    dom = GridDomain(3, np.pi * np.sqrt(2) / 8, 32)
    B = build_basis(3)
    u = ImmersionField.inclusion(dom)
    un, _ = corrugation_round(u, {4: 0.1}, 32.0, 1.0, basis=B)
    inc = pullback_metric(un).values - pullback_metric(u).values
    err = sup_norm(MetricField(dom, inc - 0.01 * np.outer(B.xi[3], B.xi[3]))) / 0.01
    return err <= 0.02, f"relative residual {err:.2e}"


def check_newton_degenerate():
    dom = GridDomain(2, 2 * np.pi, 16)
    B = build_basis(2)
    x = dom.coords()
    h = MetricField(dom, B.h_star + 0.02 * np.sin(x[..., 0])[..., None, None] * np.outer(B.xi[0], B.xi[0]))
    mu = (1.0, 8.0, 16.0)
    k = kallen_decompose(B, h, mu, 2, check="off")
    z = np.zeros((2, 2))
    nd = newton_decompose(B, h, [0.0], [z], [[z]], mu, j=2, check="off")
    err = float(np.abs(nd.amplitudes - k.amplitudes).max())
    return err <= 1e-9, f"max amplitude difference {err:.2e}"


# full-suite regressions

def check_spiral_scaling():
    dom = GridDomain(3, np.pi / 2, 64)
    B = build_basis(3)
    x = dom.coords()
    w = 2 * np.pi / dom.period
    per = np.zeros(dom.shape + (6,))
    per[..., 3] = 0.1 / w * np.sin(w * x[..., 0]) * np.cos(w * x[..., 1])
    lin = np.zeros((6, 3))
    lin[:3, :3] = np.eye(3)
    u = ImmersionField.from_periodic(dom, lin, per)
    a = 0.7 + 0.1 * np.sin(w * x[..., 2])
    out = []
    for lam in (16.0, 32.0):
        r = spiral_step(u, a, 1, lam, 0.01, mu=4.0, basis=B)
        out.append(sup_norm(MetricField(dom, r.residual + 0.01 * r.R)))
    ratio = out[1] / out[0]
    return 0.375 <= ratio <= 0.625, f"residual ratio on doubling {ratio:.3f}"


def check_oscillatory_scaling():
    dom = GridDomain(3, 2 * np.pi, 32)
    B = build_basis(3)
    x = dom.coords()
    M0 = np.array([[0.3, 0.1, 0.0], [0.1, -0.2, 0.05], [0.0, 0.05, 0.4]])
    Q = MetricField(dom, (1 + 0.3 * np.sin(x[..., 0] + x[..., 1]))[..., None, None] * M0)
    rem = []
    for j in (1, 2, 3):
        r = oscillatory_reduce(B, Q, PeriodicProfile.sin(), 1, 4.0, 1.0, j=j)
        rem.append(float(np.abs(r.remainder()).max()))
    ratios = [rem[k + 1] / rem[k] for k in range(2)]
    ok = all(0.25 / 3 <= q <= 0.25 * 3 for q in ratios)
    return ok, "remainder ratios " + ", ".join(f"{q:.3f}" for q in ratios) + " (mu/lam = 0.25)"


FAST = [
    ("symcore.project_L_roundtrip", check_project_L),
    ("symcore.phi_roundtrip", check_phi),
    ("profiles.corrugation_identity", check_profile),
    ("audit.exponent_grid", check_audit_grid),
    ("stage.schedule_identities", check_schedule),
    ("frames.residuals", check_frames),
    ("stage.spiral_flat_exact", check_spiral_flat),
    ("stage.corrugation_flat", check_corrugation_flat),
    ("decomp.newton_degenerate", check_newton_degenerate),
]

FULL = FAST + [
    ("stage.spiral_scaling", check_spiral_scaling),
    ("decomp.oscillatory_scaling", check_oscillatory_scaling),
]

SUITES = {"fast": FAST, "full": FULL}
