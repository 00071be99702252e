"""One Nash-Kuiper stage and the multi-stage driver.

A stage mollifies the current immersion, decomposes the rescaled deficit
into primitive metrics, removes the first ``n`` of them with Nash spirals
(each followed by an integration-by-parts corrector) and the remaining
``n_star - n`` with Kuiper corrugations (odd ``n``) or one spiral round plus
corrugations (even ``n``).

Two modes are supported.  ``strict`` enforces every inequality of the stage
contract and raises :class:`StrictModeViolation`; ``relaxed`` (default)
measures both sides of every inequality and records them in the trace.
The asymptotic regime ("``a`` sufficiently large") is out of reach on a
grid, so relaxed mode is the useful one at desk scale.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .decomp import kallen_decompose, oscillatory_reduce
from .errors import (AmplitudeFloorError, CForgeError, CorrugationRangeError, DecompositionFailure, NotShortError, NyquistError, PreconditionError,
                     StrictModeViolation)
from .fieldlab import (GridDomain, ImmersionField, MetricField, check_nyquist, deficit, gradient, hessian,
                       holder_seminorm, mollify, norm, pullback_metric, seminorm, snap_frequency, sup_norm)
from .frames import build_frame, tangential_correction
from .profiles import CorrugationProfile, PeriodicProfile, default_profile
from .symcore import PrimitiveBasis, build_basis, project_L, reconstruct, sym

__all__ = [
    "GlobalParams",
    "make_global_params",
    "StageSchedule",
    "make_schedule",
    "StageTrace",
    "StageOptions",
    "spiral_step",
    "corrugation_round",
    "corrugation_plan",
    "update_amplitudes",
    "run_stage",
    "init_short",
    "run",
    "RunResult",
    "base_for_ratio",
    "deficit_scale_for",
    "init_direction_count",
]

MODES = ("strict", "relaxed")


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class GlobalParams:
    """Scalar parameters shared by all stages."""

    n: int
    eps: float
    theta: float
    b: float
    vartheta: float
    alpha: float
    J: int
    a: float
    delta_star: float
    lambda_star: float
    N_star: int
    tau: float
    K_init: float = 8.0

    def delta(self, m: int) -> float:
        """``delta_m = delta_star a^(-2 vartheta b^m)``."""
        return self.delta_star * self.a ** (-2.0 * self.vartheta * self.b ** m)

    def lam(self, m: int) -> float:
        """``lambda_m = lambda_star a^(b^(m+1) + tau)``."""
        return self.lambda_star * self.a ** (self.b ** (m + 1) + self.tau)


def holder_exponent(n: int, eps: float) -> float:
    """``1/n - eps`` for odd ``n`` and ``1/(n+1) - eps`` for even ``n``."""
    return (1.0 / n if n % 2 else 1.0 / (n + 1)) - eps


def _J(n: int, eps: float) -> int:
    # guard the floor against representation error (4/(2*0.02) = 99.999...)
    x = 4.0 / ((n - 1) * eps)
    return int(math.floor(x + 1e-9 * max(1.0, x))) + 3


def make_global_params(n: int, eps: float, deficit_scale: float, a: float, *, N_star: int | None = None,
                       lambda_star: float | None = None, lambda00: float | None = None,
                       K_init: float = 8.0) -> GlobalParams:
    """Build the global schedule parameters.

    Parameters
    ----------
    n : int
        Dimension, ``n >= 2``.
    eps : float
        Accuracy parameter, ``0 < eps < min(2/n^2, 1/(n+1))``.
    deficit_scale : float
        ``inf lambda_min(g - u_bar^# e)``; ``delta_star = deficit_scale / (5 lambda_max(h_star))``.
    a : float
        Base parameter, ``a > 1``.
    N_star : int, optional
        Number of initial spirals; defaults to ``n_star``.
    lambda_star : float, optional
        Explicit frequency constant.  When omitted it is calibrated so that
        ``lambda_{0,0} = lambda00`` (default ``1``).
    """
    if int(n) != n or n < 2:
        raise PreconditionError(f"dimension must be an integer >= 2, got {n}")
    n = int(n)
    upper = min(2.0 / n ** 2, 1.0 / (n + 1))
    if not 0 < eps < upper:
        raise PreconditionError(f"eps={eps} outside (0, {upper:.6g})")
    if not a > 1:
        raise PreconditionError("a must exceed 1")
    if not deficit_scale > 0:
        raise PreconditionError("deficit_scale must be positive")
    n_star = n * (n + 1) // 2
    N_star = n_star if N_star is None else int(N_star)
    if N_star < n_star:
        raise PreconditionError(f"N_star must be at least n_star = {n_star}")
    theta = holder_exponent(n, eps)
    b = 1.0 + eps * (n - 1) / 2.0
    vartheta = b * (theta + eps) * (1.0 - (n - 1) * eps)
    alpha = eps ** 2 / 10.0
    J = _J(n, eps)
    tau = 2.0 * vartheta * b * (N_star + 1) + vartheta - b
    lam_max_h = float(np.linalg.eigvalsh(_h_star(n)).max())
    delta_star = deficit_scale / (5.0 * lam_max_h)
    gp = GlobalParams(n, float(eps), theta, b, vartheta, alpha, J, float(a), delta_star, 1.0, N_star, tau,
                      float(K_init))
    if lambda_star is None:
        target = 1.0 if lambda00 is None else float(lambda00)
        # lambda_{0,0} = 1/ell = delta_0^(1/2) lambda_0 a^alpha / delta_1^(1/2) is linear in lambda_star
        unit = math.sqrt(gp.delta(0) / gp.delta(1)) * gp.lam(0) * a ** alpha
        lambda_star = target / unit
    return replace(gp, lambda_star=float(lambda_star))


def base_for_ratio(n: int, eps: float, ratio: float) -> float:
    """Base ``a`` giving ``delta_{m+2}/delta_{m+1} = ratio`` at ``m = 0``.

    From ``delta_2/delta_1 = a^(-2 vartheta b (b-1))``.
    """
    if not 0 < ratio < 1:
        raise PreconditionError("ratio must lie in (0, 1)")
    theta = holder_exponent(n, eps)
    b = 1.0 + eps * (n - 1) / 2.0
    vartheta = b * (theta + eps) * (1.0 - (n - 1) * eps)
    return float(ratio ** (-1.0 / (2.0 * vartheta * b * (b - 1.0))))


def deficit_scale_for(n: int, eps: float, a: float, delta1: float) -> float:
    """``deficit_scale`` for which ``make_global_params`` yields ``delta_1 = delta1``."""
    gp = make_global_params(n, eps, 1.0, a)
    return float(delta1 / gp.delta(1))


def _h_star(n: int) -> np.ndarray:
    eye = np.eye(n)
    out = eye.copy()
    for i in range(n):
        for j in range(i + 1, n):
            v = (eye[i] + eye[j]) / math.sqrt(2.0)
            out += np.outer(v, v)
    return out


def top_index(n: int) -> int:
    """``[3n/2]``: ``(3n-1)/2`` for odd and ``3n/2`` for even ``n``."""
    return (3 * n - 1) // 2 if n % 2 else 3 * n // 2


@dataclass(frozen=True)
class StageSchedule:
    """Per-stage amplitudes, frequencies and the frequency ladder."""

    m: int
    delta_m: float
    delta_m1: float
    delta_m2: float
    lambda_m: float
    ell: float
    Lambda: float
    lambda_steps: tuple
    overridden: bool = False

    def nyquist_report(self, domain: GridDomain, basis: PrimitiveBasis) -> list:
        """``(step, lambda, k h)`` for every ladder entry, using the step's direction."""
        n = basis.n
        out = []
        for i, lam in enumerate(self.lambda_steps):
            if i == 0:
                continue
            xi = basis.xi[i - 1] if i <= n else basis.xi[n]
            kh = lam * float(np.abs(xi).max()) * domain.spacing
            out.append((i, lam, kh))
        return out


def make_schedule(gp: GlobalParams, m: int) -> StageSchedule:
    """Stage parameters from the closed-form schedule."""
    if m < 0:
        raise PreconditionError("stage index must be nonnegative")
    d0, d1, d2 = gp.delta(m), gp.delta(m + 1), gp.delta(m + 2)
    lam = gp.lam(m)
    ell = math.sqrt(d1) / (math.sqrt(d0) * lam * gp.a ** gp.alpha)
    Lam = d1 * gp.a ** gp.alpha / d2
    steps = [1.0 / ell]
    for i in range(1, top_index(gp.n) + 1):
        factor = Lam ** (1.0 / gp.J) if i <= gp.n else Lam
        steps.append(steps[-1] * factor)
    return StageSchedule(m, d0, d1, d2, lam, ell, Lam, tuple(steps))


def override_ladder(sched: StageSchedule, ladder) -> StageSchedule:
    """Replace the ladder by explicit frequencies ``lambda_{m,0..[3n/2]}``.

    ``ell`` follows as ``1 / ladder[0]``.
    """
    ladder = tuple(float(x) for x in ladder)
    if len(ladder) != len(sched.lambda_steps):
        raise PreconditionError(f"ladder needs {len(sched.lambda_steps)} entries, got {len(ladder)}")
    if any(b < a for a, b in zip(ladder, ladder[1:])) or ladder[0] <= 0:
        raise PreconditionError("ladder must be positive and nondecreasing")
    return replace(sched, lambda_steps=ladder, ell=1.0 / ladder[0], overridden=True)


# --------------------------------------------------------------------------
# traces


TRACE_FIELDS = ("stage", "step", "kind", "deficit_before", "deficit_after", "named_terms", "residual_sup",
                "c0_delta", "c1_delta", "c2_norm")


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


@dataclass
class StageTrace:
    """Append-only list of step records."""

    records: list = field(default_factory=list)

    def append(self, stage, step, kind, deficit_before=None, deficit_after=None, named_terms=None,
               residual_sup=None, c0_delta=None, c1_delta=None, c2_norm=None, **extra) -> dict:
        rec = dict(zip(TRACE_FIELDS, (stage, step, kind, deficit_before, deficit_after,
                                      [{"name": k, "value": v} for k, v in (named_terms or {}).items()],
                                      residual_sup, c0_delta, c1_delta, c2_norm)))
        rec.update(extra)
        rec = _clean(rec)
        self.records.append(rec)
        return rec

    def extend(self, other: "StageTrace") -> None:
        self.records.extend(other.records)

    def lines(self) -> list:
        return [json.dumps(r, sort_keys=False, separators=(",", ":")) for r in self.records]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    def of_kind(self, kind: str) -> list:
        return [r for r in self.records if r["kind"] == kind]

    @staticmethod
    def term(record: dict, name: str):
        for t in record["named_terms"]:
            if t["name"] == name:
                return t["value"]
        raise KeyError(name)


# --------------------------------------------------------------------------
# options


@dataclass
class StageOptions:
    """Knobs of a stage run.

    Attributes
    ----------
    mode : {'relaxed', 'strict'}
    kallen_depth : int, optional
        Sweeps of the amplitude recursion (default ``J``).
    corrector_depth : int
        Integration-by-parts rounds in each spiral step.
    ladder : sequence of float, optional
        Explicit ``lambda_{0,0..[3n/2]}`` for stage 0; later stages scale it
        by ``lambda_m / lambda_0``.  Frequencies are snapped to the grid's
        dual lattice in either case.
    split_rounds : bool
        Split a corrugation over repeated sub-rounds when the amplitude
        exceeds the profile range.
    profile : CorrugationProfile, optional
    scheme : str
    basis : PrimitiveBasis, optional
    """

    mode: str = "relaxed"
    kallen_depth: int | None = None
    corrector_depth: int = 1
    ladder: tuple | None = None
    split_rounds: bool = True
    profile: CorrugationProfile | None = None
    scheme: str = "spectral"
    basis: PrimitiveBasis | None = None
    init_ladder: tuple | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise PreconditionError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.corrector_depth < 0:
            raise PreconditionError("corrector depth must be nonnegative")

    def get_profile(self) -> CorrugationProfile:
        if self.profile is None:
            self.profile = default_profile()
        return self.profile

    def get_basis(self, n: int) -> PrimitiveBasis:
        if self.basis is None or self.basis.n != n:
            self.basis = build_basis(n)
        return self.basis


def _violation(mode: str, msg: str) -> None:
    if mode == "strict":
        raise StrictModeViolation(msg)


# --------------------------------------------------------------------------
# spiral steps


def _spiral_pair(i: int, count: int) -> tuple[int, int]:
    """Normal indices used by spiral step ``i`` (1-based), cycling through the frame."""
    p = (2 * (i - 1)) % count
    return p, (p + 1) % count


def _metric_change(u_new: ImmersionField, u_old: ImmersionField) -> np.ndarray:
    return pullback_metric(u_new).values - pullback_metric(u_old).values


def _msup(domain: GridDomain, arr) -> float:
    return sup_norm(MetricField(domain, arr))


@dataclass
class SpiralResult:
    u: ImmersionField
    R: np.ndarray
    increment: np.ndarray
    named: dict
    residual: np.ndarray
    record: dict


def spiral_step(u: ImmersionField, amp, i: int, lam, delta: float, *, mu: float | None = None,
                basis: PrimitiveBasis | None = None, corrector_depth: int = 1, scheme: str = "spectral",
                trace: StageTrace | None = None, stage: int = 0, target: MetricField | None = None,
                Lambda: float | None = None) -> SpiralResult:
    """One Nash spiral along ``xi_i`` at frequency ``lam``.

    ``u' = u + (delta^(1/2) a / lam)(sin(lam x.xi_i) zeta + cos(lam x.xi_i) eta) + delta F w``
    where ``zeta, eta`` are normals of ``u``, ``F = du (u^# e)^-1`` and ``w``
    is the corrector that absorbs the oscillatory error
    ``sum_j gamma_j Q_j`` by :func:`oscillatory_reduce` (depth
    ``corrector_depth``; ``0`` disables it).

    Parameters
    ----------
    amp : ScalarField, ndarray or float
        The amplitude ``a_i``.
    lam : float or StageSchedule
        Frequency ``lambda_{m,i}``; a schedule supplies ``lambda_{m,i}`` and
        ``mu = lambda_{m,i-1}`` from its ladder.
    mu : float, optional
        Frequency scale of the coefficients (the previous ladder entry);
        defaults to ``lam``.

    Returns
    -------
    SpiralResult
        New immersion, the complementary-span term ``R_i`` (unscaled), the
        metric increment, the named terms, and the leftover residual
        ``increment - delta a^2 xi xi - delta lam^-2 grad a grad a - delta R_i``.
    """
    if isinstance(lam, StageSchedule):
        mu = lam.lambda_steps[i - 1] if mu is None else mu
        lam = lam.lambda_steps[i]
    dom = u.domain
    n = dom.n
    basis = basis or build_basis(n)
    xi = basis.xi[i - 1]
    check_nyquist(dom, lam, xi)
    a = np.broadcast_to(np.asarray(getattr(amp, "values", amp), dtype=float), dom.shape)
    mu = lam if mu is None else min(float(mu), lam)
    mu = max(mu, 1.0)
    phase = dom.phase(xi, lam)
    s, c = np.sin(phase), np.cos(phase)
    zero_amp = not np.any(a)
    if zero_amp:
        inc = np.zeros(dom.shape + (n, n))
        named = {"a2_xi_xi": 0.0, "grad_a_term": 0.0, "R_i": 0.0, "oscillatory_remainder": 0.0}
        rec = None
        if trace is not None:
            rec = trace.append(stage, f"spiral_{i}", "spiral", named_terms=named, residual_sup=0.0,
                               c0_delta=0.0, c1_delta=0.0, lam=lam)
        return SpiralResult(u, np.zeros(dom.shape + (n, n)), inc, named, inc, rec)

    frame = build_frame(u)
    p, q = _spiral_pair(i, frame.count)
    zeta, eta = frame[p], frame[q]
    sd = math.sqrt(delta)
    pert = (sd / lam) * a[..., None] * (s[..., None] * zeta + c[..., None] * eta)

    R = np.zeros(dom.shape + (n, n))
    rem = np.zeros(dom.shape + (n, n))
    w = np.zeros(dom.shape + (n,))
    J = u.jacobian
    if corrector_depth > 0:
        for vec, prof in ((zeta, PeriodicProfile.sin()), (eta, PeriodicProfile.cos())):
            dvec = gradient(dom, vec, scheme)  # (..., d, n)
            Q = (2.0 * a / (sd * lam))[..., None, None] * sym(np.einsum("...ka,...kb->...ab", J, dvec))
            red = oscillatory_reduce(basis, MetricField(dom, Q), prof, i, lam, mu, j=corrector_depth,
                                     scheme=scheme)
            w -= red.w.values
            R += red.R.values
            rem += red.remainder()
            del dvec, Q, red  # large grids: release before the next pass
        pert = pert + delta * np.einsum("...ka,...a->...k", tangential_correction(u), w)
    del frame, zeta, eta, w
    u_new = u.add_periodic(pert)

    inc = _metric_change(u_new, u)
    ga = gradient(dom, np.ascontiguousarray(a), scheme)
    t_a2 = delta * (a ** 2)[..., None, None] * np.outer(xi, xi)
    t_ga = delta * np.einsum("...a,...b->...ab", ga, ga) / lam ** 2
    t_R = delta * R
    residual = inc - t_a2 - t_ga - t_R
    named = {
        "a2_xi_xi": _msup(dom, t_a2),
        "grad_a_term": _msup(dom, t_ga),
        "R_i": _msup(dom, t_R),
        "oscillatory_remainder": delta * _msup(dom, rem),
    }
    if Lambda is not None:
        r = mu / lam
        named["o_term_estimate"] = delta * r * (1.0 / Lambda + sd)
    rec = None
    if trace is not None:
        before = after = None
        if target is not None:
            before = sup_norm(target - pullback_metric(u))
            after = sup_norm(target - pullback_metric(u_new))
        rec = trace.append(stage, f"spiral_{i}", "spiral", before, after, named, _msup(dom, residual),
                           sup_norm(ImmersionField(dom, pert, np.zeros_like(u.linear))),
                           float(np.abs(u_new.jacobian - J).max()),
                           float(np.abs(hessian(dom, u_new.periodic, scheme)).max()), lam=lam, mu=mu)
    return SpiralResult(u_new, R, inc, named, residual, rec)


# --------------------------------------------------------------------------
# amplitudes and corrugations


def update_amplitudes(basis: PrimitiveBasis, a: np.ndarray, R: np.ndarray, mode: str = "relaxed") -> tuple:
    """``b_k = sqrt(a_k^2 - L_k(R))`` for ``k > n``.

    Returns ``(b, floored)`` with ``b`` of shape ``grid + (n_star - n,)``.
    Below ``sigma_star / 2`` the squared amplitude is replaced by a smooth
    floor in relaxed mode (``floored`` counts affected points) and raises in
    strict mode.
    """
    n = basis.n
    L = project_L(basis, R)[..., n:]
    b2 = a[..., n:] ** 2 - L
    f0 = basis.sigma_star / 2
    count = int((b2 < f0).sum())
    if count and mode == "strict":
        raise AmplitudeFloorError(f"a^2 - L(R) = {b2.min():.4g} below sigma_star/2 = {f0:.4g}")
    return np.sqrt(smooth_floor(b2, f0)), count


def smooth_floor(x: np.ndarray, f0: float) -> np.ndarray:
    """``x`` above ``f0``; ``f0 (1 + exp(2 (x - f0)/f0)) / 2`` below.

    The floor is C^1 at ``f0`` and stays above ``f0 / 2``.
    """
    return np.where(x < f0, 0.5 * f0 * (1.0 + np.exp(2.0 * np.minimum(x - f0, 0.0) / f0)), x)


def corrugation_plan(n: int) -> list:
    """Rounds as ``(round j, kind, 1-based direction indices)``.

    Odd ``n``: rounds ``j = 1..(n-1)/2`` corrugate ``k = nj+1..n(j+1)``.
    Even ``n``: round 1 is a spiral round over ``k = n+1..3n/2``; rounds
    ``j = 2..n/2`` corrugate ``k = n(j-2)+3n/2+1..n(j-1)+3n/2``.
    """
    plan = []
    if n % 2:
        for j in range(1, (n - 1) // 2 + 1):
            plan.append((j, "corrugation", list(range(n * j + 1, n * (j + 1) + 1))))
    else:
        plan.append((1, "spiral_round", list(range(n + 1, 3 * n // 2 + 1))))
        for j in range(2, n // 2 + 1):
            lo = n * (j - 2) + 3 * n // 2 + 1
            plan.append((j, "corrugation", list(range(lo, lo + n))))
    return plan


def corrugation_round(u: ImmersionField, amps: dict, lam: float, delta: float, *, parity_kind: str = "corrugation",
                      basis: PrimitiveBasis | None = None, profile: CorrugationProfile | None = None,
                      scheme: str = "spectral", trace: StageTrace | None = None, stage: int = 0, step: str = "",
                      target: MetricField | None = None, Lambda: float | None = None) -> tuple:
    """One round of simultaneous perturbations along several directions.

    Parameters
    ----------
    amps : dict
        ``{k: b_k}`` with 1-based direction indices ``k > n`` and amplitude
        fields (or constants).
    parity_kind : {'corrugation', 'spiral_round'}
        ``corrugation`` uses the Kuiper profile with one normal per
        direction; ``spiral_round`` uses sin/cos along a pair of normals per
        direction (the first even-dimensional round).

    Returns
    -------
    (ImmersionField, dict)
        The new immersion and the step record (``None`` without a trace).

    Raises
    ------
    CorrugationRangeError
        ``delta^(1/2) |zeta~_k| b_k`` exceeds the profile range.
    """
    dom = u.domain
    n = dom.n
    basis = basis or build_basis(n)
    ks = sorted(amps)
    if not ks:
        return u, None
    vals = {k: np.broadcast_to(np.asarray(getattr(amps[k], "values", amps[k]), dtype=float), dom.shape)
            for k in ks}
    for k in ks:
        if not n < k <= basis.n_star:
            raise PreconditionError(f"direction index {k} outside {n + 1}..{basis.n_star}")
        check_nyquist(dom, lam, basis.xi[k - 1])
    if all(not np.any(v) for v in vals.values()):
        rec = None
        if trace is not None:
            rec = trace.append(stage, step, parity_kind, named_terms={"b2_xi_xi": 0.0}, residual_sup=0.0,
                               c0_delta=0.0, c1_delta=0.0, lam=lam, directions=ks)
        return u, rec
    frame = build_frame(u)
    sd = math.sqrt(delta)
    pert = np.zeros(u.values.shape)
    expected = np.zeros(dom.shape + (n, n))
    if parity_kind == "spiral_round":
        if 2 * len(ks) > frame.count:
            raise PreconditionError("not enough normals for the spiral round")
        for q, k in enumerate(ks):
            xi = basis.xi[k - 1]
            ph = dom.phase(xi, lam)
            bt = sd * vals[k]
            pert += (bt / lam)[..., None] * (np.sin(ph)[..., None] * frame[2 * q] + np.cos(ph)[..., None] * frame[2 * q + 1])
            expected += delta * (vals[k] ** 2)[..., None, None] * np.outer(xi, xi)
    elif parity_kind == "corrugation":
        if len(ks) > frame.count:
            raise PreconditionError("not enough normals for the corrugation round")
        profile = profile or default_profile()
        F = tangential_correction(u)
        for q, k in enumerate(ks):
            xi = basis.xi[k - 1]
            zt = F @ xi  # (..., d)
            nz = np.linalg.norm(zt, axis=-1)
            zeta = zt / (nz ** 2)[..., None]
            eta = frame[q] / nz[..., None]
            bt = sd * nz * vals[k]
            if bt.max() > profile.s_max * (1 + 1e-12):
                raise CorrugationRangeError(
                    f"corrugation amplitude {bt.max():.4g} exceeds profile range {profile.s_max:g}")
            ph = dom.phase(xi, lam)
            g1, g2, _, _ = profile.evaluate(bt, ph)
            pert += (g1[..., None] * zeta + g2[..., None] * eta) / lam
            expected += delta * (vals[k] ** 2)[..., None, None] * np.outer(xi, xi)
    else:
        raise PreconditionError(f"unknown round kind {parity_kind!r}")
    u_new = u.add_periodic(pert)
    rec = None
    if trace is not None:
        inc = _metric_change(u_new, u)
        named = {"b2_xi_xi": _msup(dom, expected)}
        if Lambda is not None:
            named["o_term_estimate"] = delta * (1.0 / Lambda + delta)
        before = after = None
        if target is not None:
            before = sup_norm(target - pullback_metric(u))
            after = sup_norm(target - pullback_metric(u_new))
        rec = trace.append(stage, step, parity_kind, before, after, named, _msup(dom, inc - expected),
                           sup_norm(ImmersionField(dom, pert, np.zeros_like(u.linear))),
                           float(np.abs(u_new.jacobian - u.jacobian).max()),
                           float(np.abs(hessian(dom, u_new.periodic, scheme)).max()), lam=lam, directions=ks)
    return u_new, rec


def _split_round(u, amps, lam, delta, opts, basis, trace, stage, step, kind, target, Lambda):
    """Run a round, halving the per-sub-round target until amplitudes fit the profile."""
    parts = 1
    profile = opts.get_profile() if kind == "corrugation" else None
    while True:
        try:
            cur = u
            sub_amps = {k: np.asarray(getattr(v, "values", v), dtype=float) / math.sqrt(parts) for k, v in amps.items()}
            for p in range(parts):
                cur, _ = corrugation_round(cur, sub_amps, lam, delta, parity_kind=kind, basis=basis, profile=profile,
                                           scheme=opts.scheme, trace=trace, stage=stage,
                                           step=f"{step}" + (f".{p + 1}" if parts > 1 else ""), target=target,
                                           Lambda=Lambda)
            return cur, parts
        except CorrugationRangeError:
            if not opts.split_rounds or parts >= 64:
                raise
            parts *= 2


# --------------------------------------------------------------------------
# stage


def _snap_ladder(dom: GridDomain, basis: PrimitiveBasis, ladder) -> tuple:
    n = basis.n
    out = [float(ladder[0])]
    for i, lam in enumerate(ladder[1:], start=1):
        xi = basis.xi[i - 1] if i <= n else basis.xi[n]
        out.append(snap_frequency(dom, lam, xi))
    return tuple(out)


def stage_schedule(gp: GlobalParams, m: int, domain: GridDomain, basis: PrimitiveBasis,
                   opts: StageOptions) -> StageSchedule:
    """Closed-form schedule, optionally overridden, snapped to the grid lattice."""
    sched = make_schedule(gp, m)
    if opts.ladder is not None:
        scale = gp.lam(m) / gp.lam(0)
        sched = override_ladder(sched, [x * scale for x in opts.ladder])
    snapped = _snap_ladder(domain, basis, sched.lambda_steps)
    if snapped != sched.lambda_steps:
        sched = replace(sched, lambda_steps=snapped, overridden=True)
    return sched


def _check_resolved(domain: GridDomain, basis: PrimitiveBasis, sched: StageSchedule) -> None:
    for i, lam, kh in sched.nyquist_report(domain, basis):
        if kh > np.pi / 4 * (1 + 1e-12):
            raise NyquistError(f"stage {sched.m}: step {i} frequency {lam:.6g} gives k*h = {kh:.4f} > pi/4")


def run_stage(u_m: ImmersionField, g: MetricField, gp: GlobalParams, m: int,
              opts: StageOptions | None = None, trace: StageTrace | None = None) -> tuple:
    """Run stage ``m``: returns ``(u_{m+1}, trace, summary)``.

    The summary dictionary holds the deficits against ``g`` and against
    ``g_m = g - delta_{m+1} h_star`` before and after, and the measured sides
    of the stage contract inequalities.
    """
    opts = opts or StageOptions()
    trace = trace if trace is not None else StageTrace()
    dom = u_m.domain
    n = dom.n
    if gp.n != n:
        raise PreconditionError("parameter dimension does not match the grid")
    basis = opts.get_basis(n)
    sched = stage_schedule(gp, m, dom, basis, opts)
    _check_resolved(dom, basis, sched)
    lam = sched.lambda_steps
    d1, d2 = sched.delta_m1, sched.delta_m2
    hs = MetricField.constant(dom, basis.h_star)
    g_m = g - hs * d1
    g_next = g - hs * d2
    pre = sup_norm(deficit(g_m, u_m))
    pre_g = sup_norm(deficit(g, u_m))
    bound = basis.sigma_0 * d1
    trace.append(m, "start", "precondition", deficit_before=pre_g,
                 named_terms={"deficit_g_m": pre, "bound_sigma0_delta_m1": bound}, residual_sup=pre - bound,
                 passed=pre <= bound)
    if pre > bound:
        _violation(opts.mode, f"stage {m}: ||g_m - u_m^# e||_0 = {pre:.4g} exceeds sigma_0 delta_(m+1) = {bound:.4g}")

    # mollification and rescaled deficit
    ell = sched.ell
    if ell >= dom.period / 4:
        ell = dom.period / 8
    u0 = mollify(u_m, ell)
    gl = mollify(g, ell)
    h = (gl - pullback_metric(u0) - hs * d2) / d1
    mu = lam[: n + 1]
    depth = gp.J if opts.kallen_depth is None else opts.kallen_depth
    check = "raise" if opts.mode == "strict" else "off"
    clamped = 0
    clamp_mass = 0.0
    if opts.mode == "relaxed":
        # a deficit far outside the cone would abort the decomposition; floor
        # its coordinates instead and record how much was changed
        c = project_L(basis, h.values)
        f0 = basis.sigma_star / 2
        clamped = int((c < f0).sum())
        if clamped:
            h_new = MetricField(dom, reconstruct(basis, smooth_floor(c, f0)))
            clamp_mass = sup_norm(h_new - h) * d1
            h = h_new
    if opts.mode == "strict":
        hyp = sup_norm(h - hs) + mu[0] / mu[1]
        if hyp > 2 * basis.sigma_0:
            trace.append(m, "decompose", "decompose", named_terms={
                "h_minus_h_star_plus_ratio": hyp, "bound_2sigma0": 2 * basis.sigma_0},
                residual_sup=hyp - 2 * basis.sigma_0, passed=False, ell=ell, ladder=list(lam))
            _violation(opts.mode, f"stage {m}: ||h - h_star||_0 + mu0/mu1 = {hyp:.4g} exceeds "
                                  f"2 sigma_0 = {2 * basis.sigma_0:.4g}")
    used = depth
    while True:
        try:
            kd = kallen_decompose(basis, h, mu, used, check=check, scheme=opts.scheme)
            break
        except DecompositionFailure:
            # relaxed mode: the gradient sweeps can leave the cone when the
            # frequencies are too close; fall back to fewer sweeps
            if opts.mode == "strict" or used == 0:
                raise
            used -= 1
    hyp = sup_norm(h - hs) + mu[0] / mu[1]
    trace.append(m, "decompose", "decompose", named_terms={
        "h_minus_h_star_plus_ratio": hyp, "bound_2sigma0": 2 * basis.sigma_0,
        "E_sup": sup_norm(kd.residual), "min_amplitude": float(kd.amplitudes.min()),
        "mollify_c0": float(np.abs(u0.values - u_m.values).max()),
        "clamped_points": clamped, "clamped_metric_sup": clamp_mass},
        residual_sup=kd.reconstruction_residual(basis, h, opts.scheme), ell=ell, kallen_depth=depth,
        kallen_depth_used=used,
        ladder=list(lam))

    a = kd.amplitudes
    u = u0
    Rsum = np.zeros(dom.shape + (n, n))
    Lam_eff = lam[n + 1] / lam[n]
    for i in range(1, n + 1):
        res = spiral_step(u, a[..., i - 1], i, lam[i], d1, mu=lam[i - 1], basis=basis,
                          corrector_depth=opts.corrector_depth, scheme=opts.scheme, trace=trace, stage=m,
                          target=g_next, Lambda=Lam_eff)
        u = res.u
        Rsum += res.R
    try:
        b, floored = update_amplitudes(basis, a, Rsum, opts.mode)
    except AmplitudeFloorError as exc:
        raise StrictModeViolation(f"stage {m}: {exc}") from exc
    trace.append(m, "amplitudes", "amplitudes", named_terms={
        "R_sup": _msup(dom, Rsum), "min_b": float(b.min()), "max_b": float(b.max()),
        "floored_points": floored})

    for j, kind, ks in corrugation_plan(n):
        amps = {k: b[..., k - n - 1] for k in ks}
        u, parts = _split_round(u, amps, lam[n + j], d1, opts, basis, trace, m, f"round_{j}", kind, g_next,
                                lam[n + j] / lam[n + j - 1])
        if parts > 1:
            trace.append(m, f"round_{j}", "split", named_terms={"sub_rounds": parts})

    # contract
    post = sup_norm(deficit(g_next, u))
    post_g = sup_norm(deficit(g, u))
    diff = ImmersionField(dom, u.values - u_m.values, u.linear - u_m.linear)
    c0 = sup_norm(diff)
    c1 = float(np.linalg.norm(u.jacobian - u_m.jacobian, axis=(-2, -1)).max())
    c2 = float(np.linalg.norm(hessian(dom, u.periodic, opts.scheme).reshape(dom.shape + (-1,)), axis=-1).max())
    lam_next = gp.lam(m + 1)
    checks = {
        "deficit_next": (post, basis.sigma_0 * d2),
        "c0_step": (c0, math.sqrt(d1)),
        "c2_growth": (c2, math.sqrt(d1) * lam_next),
    }
    named = {f"{k}_lhs": v[0] for k, v in checks.items()}
    named.update({f"{k}_rhs": v[1] for k, v in checks.items()})
    named["C_star_measured"] = c1 / math.sqrt(d1)
    named["deficit_g_before"] = pre_g
    named["deficit_g_after"] = post_g
    named["deficit_g_m_before"] = pre
    rec = trace.append(m, "end", "stage", pre_g, post_g, named, post, c0, c1, c2,
                       passed={k: bool(v[0] <= v[1]) for k, v in checks.items()})
    for k, (lhs, rhs) in checks.items():
        if lhs > rhs:
            _violation(opts.mode, f"stage {m}: {k} {lhs:.4g} exceeds {rhs:.4g}")
    summary = {"deficit_g_before": pre_g, "deficit_g_after": post_g, "deficit_gm_before": pre,
               "deficit_gnext_after": post, "c0_delta": c0, "c1_delta": c1, "c2_norm": c2,
               "schedule": asdict(sched), "record": rec}
    return u, trace, summary


# --------------------------------------------------------------------------
# initialization


def _init_directions(basis: PrimitiveBasis) -> np.ndarray:
    """Primitive directions followed by the anti-diagonals ``(e_i - e_j)/sqrt(2)``."""
    n = basis.n
    eye = np.eye(n)
    extra = [(eye[i] - eye[j]) / math.sqrt(2.0) for i in range(n) for j in range(i + 1, n)]
    return np.vstack([basis.xi, np.array(extra).reshape(-1, n)])


def init_decompose(basis: PrimitiveBasis, T: np.ndarray, floor: float) -> tuple:
    """Write ``T`` as ``sum c_i nu_i nu_i`` with ``c_i >= floor`` where possible.

    Uses the fixed basis alone when its coordinates clear the floor.
    Otherwise a uniform multiple ``t`` of ``K = sum_{i<j} nu_ij^- nu_ij^-``
    (anti-diagonals) is split off: ``T = sum L_i(T - tK) xi_i xi_i + t sum nu^- nu^-``,
    which raises every diagonal-direction coordinate by ``t`` at the cost of
    ``(n-1) t`` on the axis directions.

    Returns
    -------
    dirs : ndarray (N, n)
    coeffs : ndarray grid + (N,)
    t : float
    """
    n = basis.n
    c = project_L(basis, T)
    if c.min() >= floor:
        return basis.xi.copy(), c, 0.0
    dirs = _init_directions(basis)
    minus = dirs[basis.n_star:]
    K = np.einsum("ia,ib->ab", minus, minus)
    LK = project_L(basis, K)
    t = max(0.0, floor - float(c[..., n:].min()))
    # L_k(K) = -1 on diagonals, so subtracting t K lifts them by t
    base = c - t * LK
    tail = np.full(c.shape[:-1] + (minus.shape[0],), t)
    return dirs, np.concatenate([base, tail], axis=-1), t


def init_direction_count(g: MetricField, u_bar: ImmersionField, gp: GlobalParams,
                         opts: StageOptions | None = None) -> int:
    """Number of initial spirals :func:`init_short` will use (``n_star`` or ``n^2``)."""
    opts = opts or StageOptions()
    dom = u_bar.domain
    basis = opts.get_basis(dom.n)
    ell, T = _init_target(g, u_bar, gp, basis, opts)
    dirs, _, _ = init_decompose(basis, T, basis.sigma_star * gp.delta(1))
    return int(dirs.shape[0])


def _init_target(g, u_bar, gp, basis, opts):
    dom = u_bar.domain
    hs = MetricField.constant(dom, basis.h_star)
    d1 = gp.delta(1)
    g1 = max(seminorm(g, 1, opts.scheme) + sup_norm(g), 1e-300)
    ell = min(basis.sigma_0 * d1 / (2 * g1), dom.period / 8)
    ub = mollify(u_bar, ell)
    gl = mollify(g, ell)
    return ell, (gl - pullback_metric(ub) - hs * d1).values


def init_short(g: MetricField, u_bar: ImmersionField, gp: GlobalParams, opts: StageOptions | None = None,
               trace: StageTrace | None = None) -> tuple:
    """Initial spirals turning a strictly short ``u_bar`` into ``u_0``.

    Returns ``(u_0, trace, summary)``.  The target is
    ``u_0^# e ~ g - delta_1 h_star``.

    Raises
    ------
    NotShortError
        ``g - u_bar^# e - 5 delta_star h_star`` is not positive semidefinite.
    """
    opts = opts or StageOptions()
    trace = trace if trace is not None else StageTrace()
    dom = u_bar.domain
    n = dom.n
    basis = opts.get_basis(n)
    hs = MetricField.constant(dom, basis.h_star)
    D0 = deficit(g, u_bar)
    margin = float(np.linalg.eigvalsh((D0 - hs * (5 * gp.delta_star)).values).min())
    if margin < -1e-12:
        raise NotShortError(f"g - u_bar^# e - 5 delta_star h_star has eigenvalue {margin:.4g} < 0")
    d1 = gp.delta(1)
    ell, T = _init_target(g, u_bar, gp, basis, opts)
    ub = mollify(u_bar, ell)
    floor = basis.sigma_star * d1
    dirs, coeffs, t = init_decompose(basis, T, floor)
    if coeffs.min() < 0:
        raise NotShortError(f"initial deficit has negative coordinate {coeffs.min():.4g} in the direction set")
    amps = np.sqrt(coeffs)
    N = dirs.shape[0]
    # frequencies: mu_0 = 1/ell, mu_i = K mu_{i-1}, or an explicit ladder
    if opts.init_ladder is not None:
        mus = [float(x) for x in opts.init_ladder]
        if len(mus) < N:
            raise PreconditionError(f"init ladder needs {N} frequencies, got {len(mus)}")
    else:
        mus = [gp.K_init ** i / ell for i in range(1, N + 1)]
    trace.append(-1, "init_decompose", "init", named_terms={
        "ell_bar": ell, "shortness_margin": margin, "antidiagonal_shift": t,
        "min_coefficient": float(coeffs.min()), "directions": N})
    u = ub
    for i in range(N):
        nu = dirs[i]
        lam = snap_frequency(dom, mus[i], nu)
        check_nyquist(dom, lam, nu)
        frame = build_frame(u)
        p, q = _spiral_pair(i + 1, frame.count)
        ph = dom.phase(nu, lam)
        pert = (amps[..., i] / lam)[..., None] * (np.sin(ph)[..., None] * frame[p] + np.cos(ph)[..., None] * frame[q])
        u_new = u.add_periodic(pert)
        inc = _metric_change(u_new, u)
        expected = (coeffs[..., i])[..., None, None] * np.outer(nu, nu)
        trace.append(-1, f"init_spiral_{i + 1}", "init_spiral", named_terms={"a2_nu_nu": _msup(dom, expected)},
                     residual_sup=_msup(dom, inc - expected),
                     c0_delta=float(np.abs(pert).max()), lam=lam)
        u = u_new
    target = g - hs * d1
    post = sup_norm(deficit(target, u))
    bound = basis.sigma_0 * d1
    G_star = norm(u, 1, opts.scheme) - norm(u_bar, 1, opts.scheme)
    K_star = float(np.linalg.norm(u.jacobian - u_bar.jacobian, axis=(-2, -1)).max())
    c0 = float(np.abs(u.values - u_bar.values).max())
    rec = trace.append(-1, "init_end", "init", sup_norm(D0), sup_norm(deficit(g, u)),
                       {"deficit_g0": post, "bound_sigma0_delta1": bound, "G_star_measured": G_star,
                        "K_star_measured": K_star}, post, c0, K_star, None, passed=post <= bound)
    if post > bound:
        _violation(opts.mode, f"init: ||g_0 - u_0^# e||_0 = {post:.4g} exceeds sigma_0 delta_1 = {bound:.4g}")
    return u, trace, {"deficit_g0": post, "bound": bound, "G_star": G_star, "K_star": K_star, "record": rec}


# --------------------------------------------------------------------------
# driver


@dataclass
class RunResult:
    u: ImmersionField
    trace: StageTrace
    deficits: list
    stages_run: int
    truncated: bool
    summaries: list


def interpolation_check(diff: ImmersionField, thetas=(0.25, 0.5, 0.75), scheme: str = "spectral") -> dict:
    """Measured ``[du]_theta`` against ``||.||_1^(1-theta) ||.||_2^theta`` for each ``theta``."""
    n1 = norm(diff, 1, scheme)
    n2 = norm(diff, 2, scheme)
    out = {}
    for th in thetas:
        lhs = n1 + holder_seminorm(diff, th, derivative_order=1, scheme=scheme)
        rhs = n1 ** (1 - th) * n2 ** th
        out[f"theta_{th:g}"] = lhs / rhs if rhs > 0 else None
    return out


def run(g: MetricField, u_bar: ImmersionField, gp: GlobalParams, stages: int, opts: StageOptions | None = None,
        initialize: bool = True) -> RunResult:
    """Initialization followed by ``stages`` stages.

    A stage whose ladder is not resolved by the grid ends the run early; the
    trace then carries a ``truncated`` record.
    """
    if stages < 1:
        raise PreconditionError("stages must be at least 1")
    opts = opts or StageOptions()
    trace = StageTrace()
    try:
        return _run(g, u_bar, gp, stages, opts, initialize, trace)
    except CForgeError as exc:
        exc.trace = trace  # keep the partial trace for reporting
        raise


def _run(g, u_bar, gp, stages, opts, initialize, trace) -> RunResult:
    if initialize:
        u, _, _ = init_short(g, u_bar, gp, opts, trace)
    else:
        u = u_bar
    deficits = [sup_norm(deficit(g, u))]
    summaries = []
    truncated = False
    done = 0
    for m in range(stages):
        try:
            u_next, _, summ = run_stage(u, g, gp, m, opts, trace)
        except NyquistError as exc:
            trace.append(m, "truncated", "truncated", named_terms={}, reason=str(exc))
            truncated = True
            break
        diff = ImmersionField(u.domain, u_next.values - u.values, u_next.linear - u.linear)
        interp = interpolation_check(diff, scheme=opts.scheme)
        trace.append(m, "increment", "interpolation", named_terms=interp)
        u = u_next
        deficits.append(summ["deficit_g_after"])
        summaries.append(summ)
        done += 1
    return RunResult(u, trace, deficits, done, truncated, summaries)
