"""Command line driver: ``cforge run | audit | export-mesh | verify``.

Exit codes: 0 success, 2 configuration error, 3 violated precondition,
4 numeric failure (including failed verification checks), 5 strict-mode
violation.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audit import audit_exponents
from .errors import CForgeError, ConfigError, PreconditionError, UnsupportedProjectionError
from .fieldlab import (GridDomain, ImmersionField, MetricField, deficit, pullback_metric, read_snapshot, sup_norm,
                       write_snapshot)
from .stage import (StageOptions, StageTrace, base_for_ratio, deficit_scale_for, init_direction_count,
                    make_global_params, run)
from .symcore import build_basis

__all__ = ["RunConfig", "load_config", "build_scenario", "cmd_run", "cmd_audit", "cmd_export_mesh", "cmd_verify",
           "export_obj", "main"]

log = logging.getLogger("cforge")

SCENARIOS = ("manufactured-deficit", "shrunk-inclusion", "custom")

# section -> key -> (parser, default); REQUIRED marks mandatory keys
REQUIRED = object()


def _floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SCHEMA = {
    "run": {
        "n": (int, REQUIRED),
        "eps": (float, REQUIRED),
        "a": (float, None),
        "delta_ratio": (float, None),
        "stages": (int, 1),
        "mode": (str, "relaxed"),
        "scenario": (str, "shrunk-inclusion"),
        "seed": (int, 0),
        "N_star": (int, None),
        "K_init": (float, 8.0),
        "lambda00": (float, 1.0),
        "corrector_depth": (int, 1),
        "kallen_depth": (int, None),
        "ladder": (_floats, None),
        "init_ladder": (_floats, None),
    },
    "grid": {
        "points_per_axis": (int, REQUIRED),
        "period": (float, 2 * math.pi),
    },
    "scenario": {
        "delta1": (float, 0.05),
        "shrink": (float, 0.5),
        "perturbation": (float, 0.0),
        "g_snapshot": (str, None),
        "u_snapshot": (str, None),
    },
    "export": {
        "out": (str, "cforge_out"),
        "mesh": (_bool, False),
        "csv": (_bool, False),
        "traces": (_bool, True),
    },
}


@dataclass
class RunConfig:
    """Validated run configuration (flat view of the sections)."""

    n: int
    eps: float
    points_per_axis: int
    period: float = 2 * math.pi
    a: float | None = None
    delta_ratio: float | None = None
    stages: int = 1
    mode: str = "relaxed"
    scenario: str = "shrunk-inclusion"
    seed: int = 0
    N_star: int | None = None
    K_init: float = 8.0
    lambda00: float = 1.0
    corrector_depth: int = 1
    kallen_depth: int | None = None
    ladder: tuple | None = None
    init_ladder: tuple | None = None
    delta1: float = 0.05
    shrink: float = 0.5
    perturbation: float = 0.0
    g_snapshot: str | None = None
    u_snapshot: str | None = None
    out: str = "cforge_out"
    mesh: bool = False
    csv: bool = False
    traces: bool = True
    source: str = field(default="", repr=False)

    def validate(self) -> "RunConfig":
        if self.mode not in ("strict", "relaxed"):
            raise ConfigError(f"[run] mode: expected strict or relaxed, got {self.mode!r}")
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"[run] scenario: expected one of {', '.join(SCENARIOS)}, got {self.scenario!r}")
        if (self.a is None) == (self.delta_ratio is None):
            raise ConfigError("[run] give exactly one of 'a' and 'delta_ratio'")
        if self.points_per_axis < 8:
            raise ConfigError("[grid] points_per_axis must be at least 8")
        if self.period <= 0:
            raise ConfigError("[grid] period must be positive")
        if self.stages < 1:
            raise ConfigError("[run] stages must be at least 1")
        if self.scenario == "custom" and not (self.g_snapshot and self.u_snapshot):
            raise ConfigError("[scenario] custom scenario needs g_snapshot and u_snapshot")
        if not 0 < self.shrink < 1:
            raise ConfigError("[scenario] shrink must lie in (0, 1)")
        return self

    def base(self) -> float:
        if self.a is not None:
            return self.a
        return base_for_ratio(self.n, self.eps, self.delta_ratio)


def load_config(path) -> RunConfig:
    """Parse and validate an INI configuration.

    Raises
    ------
    ConfigError
        Syntax errors (with line numbers), unknown sections or keys, missing
        required keys and malformed values (naming the key).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    values = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{path}: unknown section [{sec}]")
        for key in cp[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{path}: unknown key '{key}' in section [{sec}]")
    for sec, keys in SCHEMA.items():
        for key, (conv, default) in keys.items():
            if cp.has_option(sec, key):
                raw = cp.get(sec, key)
                try:
                    values[key] = conv(raw.strip())
                except ValueError as exc:
                    raise ConfigError(f"{path}: [{sec}] {key} = {raw!r}: {exc}") from exc
            elif default is REQUIRED:
                raise ConfigError(f"{path}: missing required key '{key}' in section [{sec}]")
            else:
                values[key] = default
    return RunConfig(**values, source=str(path)).validate()


# --------------------------------------------------------------------------
# scenarios


def _perturb(dom: GridDomain, d: int, amp: float, seed: int) -> np.ndarray:
    """Seeded smooth periodic perturbation with modes ``|k| <= 2``."""
    rng = np.random.default_rng(seed)
    x = dom.coords()
    w = dom.base_frequency
    out = np.zeros(dom.shape + (d,))
    for _ in range(4):
        k = rng.integers(-2, 3, size=dom.n)
        if not k.any():
            continue
        ph = rng.uniform(0, 2 * np.pi)
        c = rng.normal(size=d)
        out += np.sin(w * (x @ k) + ph)[..., None] * c / (1.0 + float(k @ k))
    return amp * out


def build_scenario(cfg: RunConfig):
    """Return ``(g, u_bar, deficit_scale, initialize)`` for the configured scenario."""
    if cfg.scenario == "custom":
        g = read_snapshot(cfg.g_snapshot)
        u = read_snapshot(cfg.u_snapshot)
        if not isinstance(g, MetricField) or not isinstance(u, ImmersionField):
            raise PreconditionError("custom scenario needs a metric snapshot and an immersion snapshot")
        if g.domain != u.domain or g.domain.n != cfg.n:
            raise PreconditionError("snapshots do not match the configured grid")
        scale = float(np.linalg.eigvalsh(deficit(g, u).values).min())
        if scale <= 0:
            raise PreconditionError("custom immersion is not strictly short")
        return g, u, scale, True
    dom = GridDomain(cfg.n, cfg.period, cfg.points_per_axis)
    basis = build_basis(cfg.n)
    if cfg.scenario == "manufactured-deficit":
        u = ImmersionField.inclusion(dom)
        if cfg.perturbation:
            u = u.add_periodic(_perturb(dom, u.d, cfg.perturbation, cfg.seed))
        g = pullback_metric(u) + MetricField.constant(dom, basis.h_star) * cfg.delta1
        scale = deficit_scale_for(cfg.n, cfg.eps, cfg.base(), cfg.delta1)
        return g, u, scale, False
    u = ImmersionField.inclusion(dom, scale=cfg.shrink)
    if cfg.perturbation:
        u = u.add_periodic(_perturb(dom, u.d, cfg.perturbation, cfg.seed))
    g = MetricField.constant(dom, np.eye(cfg.n))
    scale = float(np.linalg.eigvalsh(deficit(g, u).values).min())
    if scale <= 0:
        raise PreconditionError("perturbed inclusion is not strictly short")
    return g, u, scale, True


# --------------------------------------------------------------------------
# exports


def export_obj(u: ImmersionField, path, projection: str = "first-3-coords") -> tuple[int, int]:
    """Write a surface ``n = 2`` immersion as a Wavefront OBJ triangle mesh.

    The periodic seam is duplicated (``(N+1)^2`` vertices, ``2 N^2``
    triangles).  Coordinates are written with 9 significant digits.
    """
    if u.domain.n != 2:
        raise UnsupportedProjectionError(f"mesh export needs n = 2, got n = {u.domain.n}")
    dom = u.domain
    N = dom.points_per_axis
    P = dom.period
    idx = np.arange(N + 1) % N
    vals = u.values[np.ix_(idx, idx)]  # (N+1, N+1, d)
    wrap = (np.arange(N + 1) // N).astype(float) * P
    vals = vals + wrap[:, None, None] * u.linear[:, 0] + wrap[None, :, None] * u.linear[:, 1]
    pts = vals.reshape(-1, u.d)
    if projection == "first-3-coords":
        xyz = np.zeros((pts.shape[0], 3))
        k = min(3, u.d)
        xyz[:, :k] = pts[:, :k]
    elif projection == "pca3":
        c = pts - pts.mean(axis=0)
        _, _, vt = np.linalg.svd(c, full_matrices=False)
        xyz = c @ vt[:3].T
        if xyz.shape[1] < 3:
            xyz = np.pad(xyz, ((0, 0), (0, 3 - xyz.shape[1])))
    else:
        raise UnsupportedProjectionError(f"unknown projection {projection!r}")
    if not np.all(np.isfinite(xyz)):
        raise PreconditionError("immersion has non-finite coordinates")
    M = N + 1
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# cforge surface mesh {M}x{M} vertices\n")
        for p in xyz:
            fh.write("v {:.9g} {:.9g} {:.9g}\n".format(*p))
        faces = 0
        for i in range(N):
            for j in range(N):
                a = i * M + j + 1
                b = (i + 1) * M + j + 1
                fh.write(f"f {a} {b} {b + 1}\nf {a} {b + 1} {a + 1}\n")
                faces += 2
    return xyz.shape[0], faces


def export_csv_slice(u: ImmersionField, path) -> None:
    """Coordinates of ``u`` on the slice ``x_3 = ... = x_n = 0``."""
    dom = u.domain
    index = (slice(None), slice(None)) + (0,) * (dom.n - 2)
    vals = u.values[index]
    ax = dom.axis()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2"] + [f"u{k + 1}" for k in range(u.d)])
        for i in range(dom.points_per_axis):
            for j in range(dom.points_per_axis):
                w.writerow([f"{ax[i]:.17g}", f"{ax[j]:.17g}"] + [f"{v:.17g}" for v in vals[i, j]])


# --------------------------------------------------------------------------
# commands


def cmd_run(cfg: RunConfig) -> int:
    """Run the configured scenario and write artifacts to ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    g, u_bar, scale, initialize = build_scenario(cfg)
    a = cfg.base()
    basis = build_basis(cfg.n)
    opts = StageOptions(mode=cfg.mode, kallen_depth=cfg.kallen_depth, corrector_depth=cfg.corrector_depth,
                        ladder=cfg.ladder, basis=basis, init_ladder=cfg.init_ladder)
    gp = make_global_params(cfg.n, cfg.eps, scale, a, N_star=cfg.N_star, lambda00=cfg.lambda00, K_init=cfg.K_init)
    if initialize and cfg.N_star is None:
        count = init_direction_count(g, u_bar, gp, opts)
        if count != gp.N_star:
            gp = make_global_params(cfg.n, cfg.eps, scale, a, N_star=count, lambda00=cfg.lambda00,
                                    K_init=cfg.K_init)
    log.info("n=%d eps=%g a=%.6g delta_1=%.4g N_star=%d", cfg.n, cfg.eps, a, gp.delta(1), gp.N_star)
    t0 = time.perf_counter()
    try:
        result = run(g, u_bar, gp, cfg.stages, opts, initialize=initialize)
    except CForgeError as exc:
        partial = getattr(exc, "trace", None)
        if isinstance(partial, StageTrace) and cfg.traces:
            partial.write(out / "trace.jsonl")
        raise
    write_snapshot(out / "u_final.snap", result.u)
    if cfg.traces:
        result.trace.write(out / "trace.jsonl")
    if cfg.mesh:
        export_obj(result.u, out / "u_final.obj")
    if cfg.csv:
        export_csv_slice(result.u, out / "u_final_slice.csv")
    summary = {
        "n": cfg.n, "eps": cfg.eps, "a": a, "mode": cfg.mode, "scenario": cfg.scenario,
        "delta_1": gp.delta(1), "delta_2": gp.delta(2), "N_star": gp.N_star,
        "deficits": result.deficits, "stages_run": result.stages_run, "truncated": result.truncated,
        "final_deficit": sup_norm(deficit(g, result.u)),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("done in %.1f s; deficits %s", time.perf_counter() - t0, ", ".join(f"{d:.4g}" for d in result.deficits))
    print(json.dumps({k: summary[k] for k in ("deficits", "stages_run", "truncated")}))
    return 0


def cmd_audit(n: int, eps: float, N_star: int | None = None, out: str | None = None) -> int:
    """Print the exponent audit; exit 0 iff every check passes."""
    rep = audit_exponents(n, eps, N_star)
    print(rep.table())
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(rep.jsonl(), encoding="utf-8")
    return 0 if rep.passed else 4


def cmd_export_mesh(snapshot, out, projection: str = "first-3-coords") -> int:
    u = read_snapshot(snapshot)
    if not isinstance(u, ImmersionField):
        raise PreconditionError(f"{snapshot} does not hold an immersion")
    nv, nf = export_obj(u, out, projection)
    print(f"wrote {out}: {nv} vertices, {nf} triangles")
    return 0


def cmd_verify(suite: str) -> int:
    """Run a property suite; exit 0 iff every check passes."""
    from .verify import SUITES
    if suite not in SUITES:
        raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
    failed = 0
    for name, fn in SUITES[suite]:
        t = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # noqa: BLE001 - every failure is reported per check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'} {name} ({time.perf_counter() - t:.1f}s) {detail}", flush=True)
    print(f"{suite}: {len(SUITES[suite]) - failed}/{len(SUITES[suite])} checks passed")
    return 0 if failed == 0 else 4


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cforge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a configured scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.add_argument("--seed", type=int)
    r.add_argument("--mode", choices=("strict", "relaxed"))
    a = sub.add_parser("audit", help="check the exponent inequalities")
    a.add_argument("--config")
    a.add_argument("--n", type=int)
    a.add_argument("--eps", type=float)
    a.add_argument("--n-star", type=int, dest="n_star")
    a.add_argument("--out")
    e = sub.add_parser("export-mesh", help="write an OBJ mesh of a surface snapshot")
    e.add_argument("snapshot")
    e.add_argument("--out", required=True)
    e.add_argument("--projection", choices=("first-3-coords", "pca3"), default="first-3-coords")
    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", default="fast")
    return p


def _dispatch(args) -> int:
    if args.command == "run":
        cfg = load_config(args.config)
        if args.out:
            cfg.out = args.out
        if args.seed is not None:
            cfg.seed = args.seed
        if args.mode:
            cfg.mode = args.mode
        return cmd_run(cfg.validate())
    if args.command == "audit":
        n, eps, N_star = args.n, args.eps, args.n_star
        if args.config:
            cfg = load_config(args.config)
            n = cfg.n if n is None else n
            eps = cfg.eps if eps is None else eps
            N_star = cfg.N_star if N_star is None else N_star
        if n is None or eps is None:
            raise ConfigError("audit needs --n and --eps (or --config)")
        return cmd_audit(n, eps, N_star, args.out)
    if args.command == "export-mesh":
        return cmd_export_mesh(args.snapshot, args.out, args.projection)
    return cmd_verify(args.suite)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except CForgeError as exc:
        print(f"cforge: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (MemoryError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"cforge: numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
