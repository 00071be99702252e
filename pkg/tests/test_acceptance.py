"""Acceptance criteria 1-10.

Each criterion is a plain function returning ``(ok, detail)`` so that the
module also runs as a script (``python tests/test_acceptance.py``).  Under
pytest every criterion prints one ``PASS``/``FAIL`` line, which is also
collected into the terminal summary.

Criteria 4 and 7 are not met at desk scale; they are implemented at their
stated tolerances and fail.  The measured numbers are printed in the
detail string.
"""

from __future__ import annotations

import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from cforge.audit import audit_exponents
from cforge.cli import load_config, cmd_run
from cforge.decomp import HypothesisWarning, kallen_decompose, newton_decompose
from cforge.fieldlab import (GridDomain, ImmersionField, MetricField, pullback_metric, seminorm,
                             sup_norm)
from cforge.frames import build_frame, frame_residuals
from cforge.profiles import default_profile, solve_f
from cforge.stage import (StageOptions, base_for_ratio, corrugation_round, deficit_scale_for,
                          make_global_params, run_stage, spiral_step)
from cforge.symcore import apply_phi, build_basis, project_L, reconstruct, solve_phi

AUDIT_GRID = [(n, eps) for n in (3, 4, 5, 6) for eps in (0.001, 0.005, 0.01, 0.02) if eps < 2.0 / n ** 2]


def _rand_sym(rng, n, count):
    a = rng.uniform(-1.0, 1.0, size=(count, n, n))
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def _graph(n, N, period=2 * np.pi, amp=0.3):
    dom = GridDomain(n, period, N)
    x = dom.coords()
    w = 2 * np.pi / period
    per = np.zeros(dom.shape + (2 * n,))
    per[..., n] = amp / w * np.sin(w * x[..., 0]) * np.cos(w * x[..., 1])
    per[..., n + 1] = 0.7 * amp / w * np.cos(w * (x[..., 0] + x[..., 1]))
    lin = np.zeros((2 * n, n))
    lin[:n, :n] = np.eye(n)
    return ImmersionField.from_periodic(dom, lin, per)


# --------------------------------------------------------------------------
# criteria


def criterion_1():
    """Exponent reproduction and the inequality grid."""
    t0 = time.perf_counter()
    theta_ok = True
    for n, eps in ((3, 0.02), (3, 0.001), (4, 0.02), (4, 0.01)):
        want = (1.0 / 3.0 if n == 3 else 1.0 / 5.0) - eps
        theta_ok &= audit_exponents(n, eps).computed["theta"] == want
    worst = (math.inf, None)
    failed = []
    for n, eps in AUDIT_GRID:
        rep = audit_exponents(n, eps)
        for c in rep.checks:
            if not c.passed or c.margin <= 1e-8:
                failed.append((n, eps, c.id))
            if c.margin < worst[0]:
                worst = (c.margin, (n, eps, c.id))
    dt = time.perf_counter() - t0
    ok = theta_ok and not failed and len(AUDIT_GRID) == 16 and dt < 1.0
    return ok, (f"theta exact={theta_ok}, {len(AUDIT_GRID)} grid points, smallest margin {worst[0]:.3e} "
                f"at {worst[1]}, failures {failed}, {dt:.2f}s")


def criterion_2():
    """project_L and Phi_i round trips."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    wl = wp = 0.0
    for n in range(2, 7):
        B = build_basis(n)
        h = _rand_sym(rng, n, 1000)
        wl = max(wl, float(np.linalg.norm(reconstruct(B, project_L(B, h)) - h, axis=(-2, -1)).max()))
        for i in range(1, n + 1):
            al, be = solve_phi(B, i, 1.0, h)
            wp = max(wp, float(np.linalg.norm(apply_phi(B, i, 1.0, al, be) - h, axis=(-2, -1)).max()))
    dt = time.perf_counter() - t0
    ok = wl <= 1e-11 and wp <= 1e-11 and dt < 10.0
    return ok, f"project_L residual {wl:.2e}, Phi residual {wp:.2e}, {dt:.2f}s"


def criterion_3():
    """Corrugation identity on the table and the small-s limit of f."""
    t0 = time.perf_counter()
    prof = default_profile()
    ident = prof.identity_residual()
    ratio = solve_f(1e-3) / (2 * 1e-3 ** 2)
    dt = time.perf_counter() - t0
    ok = ident <= 1e-9 and 0.98 <= ratio <= 1.02 and dt < 5.0
    return ok, f"identity residual {ident:.2e}, f(s)/(2s^2) at s=1e-3 = {ratio:.6f}, {dt:.2f}s"


def criterion_4():
    """Successive residual ratios of the amplitude recursion against (mu0/mu1)^2."""
    t0 = time.perf_counter()
    n = 3
    B = build_basis(n)
    dom = GridDomain(n, np.pi / 4, 32)
    x = dom.coords()
    h = MetricField(dom, B.h_star + 0.1 * B.sigma_0 * np.sin(2 * np.pi * x[..., 0] / dom.period)[..., None, None]
                    * np.outer(B.xi[0], B.xi[0]))
    # mu_0 is the tightest value allowed by [h]_i <= mu_0^i (i = 1, 2)
    mu0 = max(seminorm(h, 1), seminorm(h, 2) ** 0.5, 1.0)
    mu = (mu0,) + (8.0 * mu0,) * n
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", HypothesisWarning)
        E = [sup_norm(kallen_decompose(B, h, mu, j).residual) for j in range(4)]
    ratios = [E[k + 1] / E[k] for k in range(3)]
    target = (1.0 / 8.0) ** 2
    lo, hi = 0.7 * target, 1.3 * target
    slope = np.polyfit(np.arange(4), np.log(E), 1)[0] / math.log(1.0 / 8.0)
    dt = time.perf_counter() - t0
    ok = all(lo <= r <= hi for r in ratios) and dt < 30.0
    return ok, (f"ratios {', '.join(f'{r:.5f}' for r in ratios)} vs window [{lo:.5f}, {hi:.5f}], "
                f"fitted exponent per increment {slope:.3f}, {dt:.2f}s")


def criterion_5():
    """Spiral increment: exact on a flat base, O(1/lambda) remainder on a curved one."""
    t0 = time.perf_counter()
    B = build_basis(3)
    dom = GridDomain(3, np.pi / 2, 128)
    delta = 0.01
    u = ImmersionField.inclusion(dom)
    r = spiral_step(u, 0.8, 1, 32.0, delta, basis=B)
    flat = sup_norm(MetricField(dom, r.increment - delta * 0.64 * np.outer(B.xi[0], B.xi[0])))
    del r, u
    x = dom.coords()
    w = 2 * np.pi / dom.period
    per = np.zeros(dom.shape + (6,))
    per[..., 3] = 0.1 / w * np.sin(w * x[..., 0]) * np.cos(w * x[..., 1])
    lin = np.zeros((6, 3))
    lin[:3, :3] = np.eye(3)
    uc = ImmersionField.from_periodic(dom, lin, per)
    a = 0.7 + 0.1 * np.sin(w * x[..., 2])
    del x, per
    res = []
    for lam in (32.0, 64.0):
        r = spiral_step(uc, a, 1, lam, delta, mu=4.0, basis=B)
        # increment - delta a^2 xi xi - delta lam^-2 grad a grad a
        res.append(sup_norm(MetricField(dom, r.residual + delta * r.R)))
        del r
    ratio = res[1] / res[0]
    dt = time.perf_counter() - t0
    ok = flat <= 1e-6 * delta and 0.375 <= ratio <= 0.625 and dt < 180.0
    return ok, (f"flat residual/delta {flat / delta:.2e}, curved residual {res[0]:.3e} -> {res[1]:.3e} "
                f"(ratio {ratio:.3f}), {dt:.1f}s")


def criterion_6():
    """Corrugation increment on a flat base."""
    t0 = time.perf_counter()
    B = build_basis(3)
    dom = GridDomain(3, np.pi * np.sqrt(2) / 8, 64)
    u = ImmersionField.inclusion(dom)
    g0 = pullback_metric(u).values
    b, delta = 0.1, 1.0
    worst = 0.0
    for k in range(4, 7):
        un, _ = corrugation_round(u, {k: b}, 64.0, delta, basis=B)
        inc = pullback_metric(un).values - g0
        err = sup_norm(MetricField(dom, inc - delta * b ** 2 * np.outer(B.xi[k - 1], B.xi[k - 1])))
        worst = max(worst, err / (delta * b ** 2))
    dt = time.perf_counter() - t0
    ok = worst <= 0.02 and dt < 120.0
    return ok, f"max relative residual over k=4..6 {worst:.2e} (bound 0.02), {dt:.1f}s"


def criterion_7():
    """One relaxed stage on a manufactured deficit."""
    t0 = time.perf_counter()
    n, eps, delta1 = 3, 0.2, 0.05
    B = build_basis(n)
    dom = GridDomain(n, 2 * np.pi, 64)
    a = base_for_ratio(n, eps, 0.3)
    gp = make_global_params(n, eps, deficit_scale_for(n, eps, a, delta1), a)
    u = ImmersionField.inclusion(dom)
    g = MetricField.constant(dom, np.eye(n) + gp.delta(1) * B.h_star)
    opts = StageOptions(mode="relaxed", basis=B, ladder=(1.0, 1.0, 2.0, 6.0, 8.0 * math.sqrt(2.0)))
    _, _, summ = run_stage(u, g, gp, 0, opts)
    pre, post = summ["deficit_g_before"], summ["deficit_g_after"]
    c0, bound = summ["c0_delta"], math.sqrt(gp.delta(1))
    dt = time.perf_counter() - t0
    ok = post <= 0.5 * pre and c0 <= bound and dt < 600.0
    return ok, (f"deficit {pre:.4f} -> {post:.4f} (ratio {post / pre:.3f}, bound 0.5), "
                f"C0 step {c0:.4f} vs delta_1^(1/2) = {bound:.4f}, {dt:.1f}s")


def criterion_8():
    """Normal frame residuals on every test immersion."""
    t0 = time.perf_counter()
    B = build_basis(3)
    cases = {
        "inclusion n=2": ImmersionField.inclusion(GridDomain(2, 2 * np.pi, 32)),
        "inclusion n=3": ImmersionField.inclusion(GridDomain(3, 1.0, 16)),
        "scaled inclusion n=3": ImmersionField.inclusion(GridDomain(3, 1.0, 16), scale=2.0),
        "graph n=2": _graph(2, 64),
        "graph n=3": _graph(3, 32),
        "graph n=4": _graph(4, 8),
    }
    sp = spiral_step(_graph(3, 32, np.pi / 2, 0.1), 0.7, 2, 16.0, 0.01, mu=4.0, basis=B)
    cases["after spiral n=3"] = sp.u
    cases["after corrugation n=3"] = corrugation_round(ImmersionField.inclusion(GridDomain(3, np.pi * np.sqrt(2) / 8, 32)),
                                                       {4: 0.1, 5: 0.1, 6: 0.1}, 32.0, 1.0, basis=B)[0]
    worst = 0.0
    where = None
    for name, u in cases.items():
        r = max(frame_residuals(build_frame(u)))
        if r >= worst:
            worst, where = r, name
    dt = time.perf_counter() - t0
    ok = worst <= 1e-10 and dt < 60.0
    return ok, f"{len(cases)} immersions, max residual {worst:.2e} ({where}), {dt:.1f}s"


def criterion_9():
    """Newton decomposition: degenerate and perturbed inputs."""
    t0 = time.perf_counter()
    B = build_basis(2)
    dom = GridDomain(2, 2 * np.pi, 32)
    x = dom.coords()
    h = MetricField(dom, B.h_star + 0.02 * np.sin(x[..., 0])[..., None, None] * np.outer(B.xi[0], B.xi[0])
                    + 0.01 * np.cos(x[..., 1])[..., None, None] * np.outer(B.xi[2], B.xi[2]))
    mu = (1.0, 8.0, 16.0)
    z = np.zeros((2, 2))
    worst_deg = 0.0
    for j in (0, 1, 2):
        k = kallen_decompose(B, h, mu, j, check="off")
        nd = newton_decompose(B, h, [0.0], [z], [[z]], mu, j=j, check="off")
        worst_deg = max(worst_deg, float(np.abs(nd.amplitudes - k.amplitudes).max()))
    cases = [
        (MetricField.constant(dom, B.h_star), [0.0], [0.01 * np.outer(B.xi[2], B.xi[2])], [[z]]),
        (h, [0.01 + 0.005 * np.sin(x[..., 1])], [0.01 * np.outer(B.xi[2], B.xi[2])],
         [[0.005 * np.outer(B.xi[0], B.xi[1]) + 0.005 * np.outer(B.xi[1], B.xi[0])]]),
    ]
    iters, recon = 0, 0.0
    for hh, T, G, Th in cases:
        for j in (0, 2):
            nd = newton_decompose(B, hh, T, G, Th, mu, j=j, check="off")
            iters = max(iters, nd.newton_iterations)
            recon = max(recon, float(np.abs(nd.reconstruction(B, T, G, Th, dom) - hh.values).max()))
    dt = time.perf_counter() - t0
    ok = worst_deg <= 1e-9 and iters <= 6 and recon <= 1e-9 and dt < 60.0
    return ok, (f"degenerate vs recursion {worst_deg:.2e}, Newton iterations {iters}, "
                f"reconstruction {recon:.2e}, {dt:.1f}s")


CONFIG_10 = """\
[run]
n = 3
eps = 0.2
delta_ratio = 0.3
stages = 2
scenario = manufactured-deficit
seed = 11
ladder = 1 1 2 3 5.656854249492381

[grid]
points_per_axis = 32

[scenario]
delta1 = 0.05
perturbation = 0.01
"""


def criterion_10(tmp: Path | None = None):
    """Two runs of the same configuration give identical bytes."""
    import tempfile

    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory(dir=tmp) as d:
        d = Path(d)
        cfg_path = d / "run.ini"
        cfg_path.write_text(CONFIG_10)
        codes, snaps, traces = [], [], []
        for tag in ("a", "b"):
            cfg = load_config(cfg_path)
            cfg.out = str(d / tag)
            codes.append(cmd_run(cfg))
            snaps.append((d / tag / "u_final.snap").read_bytes())
            traces.append((d / tag / "trace.jsonl").read_bytes())
    dt = time.perf_counter() - t0
    same = snaps[0] == snaps[1] and traces[0] == traces[1]
    ok = codes == [0, 0] and same
    return ok, (f"exit codes {codes}, snapshot {len(snaps[0])} bytes identical={snaps[0] == snaps[1]}, "
                f"trace identical={traces[0] == traces[1]}, {dt:.1f}s")


CRITERIA = {k: globals()[f"criterion_{k}"] for k in range(1, 11)}


def _line(k, ok, detail):
    return f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}"


# --------------------------------------------------------------------------
# pytest entry points


def _check(k, **kw):
    from conftest import ACCEPTANCE_LINES

    ok, detail = CRITERIA[k](**kw)
    line = _line(k, ok, detail)
    ACCEPTANCE_LINES[k] = line
    print(line)
    assert ok, line


def test_criterion_01_exponents():
    _check(1)


def test_criterion_02_decomposition_roundtrip():
    _check(2)


def test_criterion_03_corrugation_identity():
    _check(3)


def test_criterion_04_kallen_residual_scaling():
    _check(4)


@pytest.mark.slow
def test_criterion_05_spiral_increment():
    _check(5)


def test_criterion_06_corrugation_increment():
    _check(6)


@pytest.mark.slow
def test_criterion_07_end_to_end_stage():
    _check(7)


def test_criterion_08_normal_frames():
    _check(8)


def test_criterion_09_newton():
    _check(9)


def test_criterion_10_determinism(tmp_path):
    _check(10, tmp=tmp_path)


if __name__ == "__main__":
    chosen = [int(a) for a in sys.argv[1:]] or list(CRITERIA)
    results = []
    for k in chosen:
        ok, detail = CRITERIA[k]()
        results.append(ok)
        print(_line(k, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
