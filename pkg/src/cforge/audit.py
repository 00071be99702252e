"""Exponent arithmetic checks and decay-rate extraction.

Every inequality that gates the stage schedule is evaluated in double
precision with its margin ``rhs - lhs`` reported.  The formulas are written
exactly as the closed forms of the schedule; the test-suite compares them
with independently expanded versions.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError

__all__ = [
    "Check",
    "AuditReport",
    "DegenerateExponentError",
    "audit_exponents",
    "beta_exponent",
    "stage_index_threshold",
    "stage_index_bisect",
    "DecayFit",
    "fit_decay",
]


class DegenerateExponentError(PreconditionError):
    """``vartheta <= b theta``: the stage threshold is undefined."""


@dataclass(frozen=True)
class Check:
    id: str
    lhs: float
    rhs: float
    strict: bool = True

    @property
    def margin(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.lhs < self.rhs if self.strict else self.lhs <= self.rhs


@dataclass
class AuditReport:
    """Inputs, derived exponents and the list of checks."""

    inputs: dict
    computed: dict
    checks: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def check(self, cid: str) -> Check:
        for c in self.checks:
            if c.id == cid:
                return c
        raise KeyError(cid)

    def binding(self) -> Check:
        """The check with the smallest margin."""
        return min(self.checks, key=lambda c: c.margin)

    def records(self) -> list:
        head = {"kind": "audit_inputs", **self.inputs, **self.computed}
        rows = [{"kind": "audit_check", "id": c.id, "lhs": c.lhs, "rhs": c.rhs, "margin": c.margin,
                 "strict": c.strict, "passed": c.passed} for c in self.checks]
        return [head] + rows

    def jsonl(self) -> str:
        return "\n".join(json.dumps(r, separators=(",", ":")) for r in self.records()) + "\n"

    def table(self) -> str:
        lines = [
            "n={n} eps={eps:g} N_star={N_star}".format(**self.inputs),
            "  ".join(f"{k}={v:.10g}" for k, v in self.computed.items()),
            f"{'check':<14}{'lhs':>22}{'rhs':>22}{'margin':>14}  ok",
        ]
        for c in self.checks:
            lines.append(f"{c.id:<14}{c.lhs:>22.15g}{c.rhs:>22.15g}{c.margin:>14.4e}  {'yes' if c.passed else 'NO'}")
        return "\n".join(lines)


def _exponents(n: int, eps: float, N_star: int) -> dict:
    theta = (1.0 / n if n % 2 else 1.0 / (n + 1)) - eps
    b = 1.0 + eps * (n - 1) / 2.0
    vartheta = b * (theta + eps) * (1.0 - (n - 1) * eps)
    alpha = eps ** 2 / 10.0
    x = 4.0 / ((n - 1) * eps)
    J = int(math.floor(x + 1e-9 * max(1.0, x))) + 3
    tau = 2.0 * vartheta * b * (N_star + 1) + vartheta - b
    return {"theta": theta, "b": b, "vartheta": vartheta, "tau": tau, "alpha": alpha, "J": J}


def beta_exponent(n: int, b: float, J: int) -> float:
    """The exponent ``beta`` bounding ``vartheta/b`` from above."""
    if n % 2:
        return (J * (n - 1) * (b - 1) + 2 * b * n) / (J * n)
    return (J * n * (b - 1) + 2 * b * n) / (J * (n + 1))


def _validate(n, eps):
    if int(n) != n or n < 3:
        raise PreconditionError(f"audit needs an integer n >= 3, got {n}")
    if not 0 < eps < 2.0 / n ** 2:
        raise PreconditionError(f"eps={eps} outside (0, 2/n^2 = {2.0 / n ** 2:.6g})")


def audit_exponents(n: int, eps: float, N_star: int | None = None) -> AuditReport:
    """Evaluate every exponent inequality for ``(n, eps)``.

    Checks (ids):

    ``gap1``/``gap2``
        The first and second stage-gap inequalities (odd or even form).
    ``holder_lo``/``holder_hi``
        ``theta < vartheta/b`` and ``vartheta/b < (theta + eps)/(1 + beta)``.
    ``alpha_bound``
        ``alpha <= (n-1)^2 eps^2 / (2n(n+2))``.
    ``eps_small``
        ``eps < 2/(3n+1)``.
    ``cubic``
        ``-(n-1)^2 eps^3 - (9n-11)/(5(n+1)) eps^2 + (3n+1)/(n+1) eps - 2/(n+1) <= 0``.
    ``threshold``
        ``vartheta - b theta > 0`` (the stage threshold is defined).
    """
    _validate(n, eps)
    n = int(n)
    N_star = n * (n + 1) // 2 if N_star is None else int(N_star)
    if N_star < n * (n + 1) // 2:
        raise PreconditionError("N_star must be at least n(n+1)/2")
    e = _exponents(n, eps, N_star)
    th, b, vt, al, J = e["theta"], e["b"], e["vartheta"], e["alpha"], e["J"]
    beta = beta_exponent(n, b, J)
    checks = []
    if n % 2:
        checks.append(Check("gap1", 1 - vt / b + (2 * vt * (b - 1) + b * al) * (J * (n - 1) + 2 * n) / (2 * J), b - vt))
        checks.append(Check("gap2", al * (J * (n + 1) + 2 * n) / (2 * J),
                            b * (b - 1) * (1 - vt * (n + 2 * n / J - (b - 1) / b))))
    else:
        checks.append(Check("gap1", 1 - vt / b + n * (2 * vt * (b - 1) + b * al) * (J + 2) / (2 * J), b - vt))
        checks.append(Check("gap2", al * (J * (n + 2) + 2 * n) / (2 * J),
                            b * (b - 1) * (1 - vt * (n + 1 + 2 * n / J - (b - 1) / b))))
    checks.append(Check("holder_lo", th, vt / b))
    checks.append(Check("holder_hi", vt / b, (th + eps) / (1 + beta)))
    checks.append(Check("alpha_bound", al, (n - 1) ** 2 * eps ** 2 / (2 * n * (n + 2)), strict=False))
    checks.append(Check("eps_small", eps, 2.0 / (3 * n + 1)))
    cubic = (-(n - 1) ** 2 * eps ** 3 - (9 * n - 11) / (5 * (n + 1)) * eps ** 2 + (3 * n + 1) / (n + 1) * eps
             - 2.0 / (n + 1))
    checks.append(Check("cubic", cubic, 0.0, strict=False))
    checks.append(Check("threshold", 0.0, vt - b * th))
    computed = dict(e)
    computed["beta"] = beta
    return AuditReport({"n": n, "eps": float(eps), "N_star": N_star}, computed, checks)


def _threshold_inputs(gp):
    if hasattr(gp, "vartheta"):
        return gp.theta, gp.b, gp.vartheta, gp.tau
    n, eps, N_star = gp
    e = _exponents(int(n), float(eps), int(N_star))
    return e["theta"], e["b"], e["vartheta"], e["tau"]


def stage_index_threshold(gp) -> int:
    """Smallest stage index ``m >= 0`` with ``m > log_b(tau theta / (b (vartheta - b theta)))``.

    Parameters
    ----------
    gp : GlobalParams or tuple ``(n, eps, N_star)``

    Raises
    ------
    DegenerateExponentError
        ``vartheta <= b theta``.
    """
    th, b, vt, tau = _threshold_inputs(gp)
    if not b > 1:
        raise PreconditionError("b must exceed 1")
    if vt <= b * th:
        raise DegenerateExponentError(f"vartheta = {vt:.6g} <= b theta = {b * th:.6g}")
    arg = tau * th / (b * (vt - b * th))
    if arg <= 0:
        return 0
    x = math.log(arg) / math.log(b)
    return max(0, math.floor(x) + 1)


def stage_index_bisect(gp, m_max: int = 1 << 20) -> int:
    """Same threshold from the sign of ``tau theta - b^(m+2) (vartheta/b - theta)``.

    The sign change is located by doubling followed by integer bisection.
    """
    th, b, vt, tau = _threshold_inputs(gp)
    if vt <= b * th:
        raise DegenerateExponentError(f"vartheta = {vt:.6g} <= b theta = {b * th:.6g}")

    def neg(m):
        # compare in log form so large m does not overflow
        gap = vt / b - th
        lhs = tau * th
        if lhs <= 0:
            return True
        return math.log(lhs) < (m + 2) * math.log(b) + math.log(gap)

    if neg(0):
        return 0
    hi = 1
    while not neg(hi):
        hi *= 2
        if hi > m_max:
            raise PreconditionError("threshold search exceeded m_max")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if neg(mid):
            hi = mid
        else:
            lo = mid
    return hi


@dataclass
class DecayFit:
    """Result of :func:`fit_decay`.

    ``slope`` is the fitted rate of ``log log(delta_star / deficit)`` in
    ``m`` (``None`` with fewer than 3 usable points); ``expected`` is
    ``log b`` when ``b`` is supplied.
    """

    slope: float | None
    intercept: float | None
    r2: float | None
    factors: list
    monotone: bool
    insufficient: bool
    used: int
    expected: float | None = None

    @property
    def relative_error(self) -> float | None:
        if self.slope is None or self.expected is None:
            return None
        return abs(self.slope - self.expected) / abs(self.expected)


def fit_decay(deficits, b: float | None = None, delta_star: float = 1.0) -> DecayFit:
    """Fit the doubly exponential decay of a deficit sequence.

    The model ``d_m = delta_star a^(-2 vartheta b^m)`` gives
    ``log log(delta_star / d_m) = m log b + const``.  Per-stage factors
    ``d_{m+1}/d_m`` are always reported.  Non-monotone data is flagged,
    not rejected; entries with ``d_m >= delta_star`` are dropped from the fit.
    """
    d = np.asarray(list(deficits), dtype=float)
    if d.ndim != 1 or d.size == 0:
        raise PreconditionError("need a nonempty sequence of deficits")
    if np.any(~np.isfinite(d)) or np.any(d <= 0):
        raise PreconditionError("deficits must be positive and finite")
    factors = [float(x) for x in d[1:] / d[:-1]]
    monotone = bool(np.all(np.diff(d) < 0))
    m = np.arange(d.size, dtype=float)
    ok = d < delta_star
    y = np.log(np.log(delta_star / d[ok]))
    x = m[ok]
    expected = math.log(b) if b is not None else None
    if x.size < 3:
        return DecayFit(None, None, None, factors, monotone, True, int(x.size), expected)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(((y - pred) ** 2).sum()) / ss if ss > 0 else 1.0
    return DecayFit(float(slope), float(intercept), r2, factors, monotone, False, int(x.size), expected)
