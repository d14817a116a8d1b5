"""Command-line front end.

Exit codes: 0 success, 1 bad configuration, 2 solver failure, 3 precondition
violation. Failures print one line ``error code=<n> kind=<Type> message=<json string>``
to stderr. MONOCAP_THREADS caps the BLAS/OpenMP thread pools.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def _apply_threads():
    n = os.environ.get("MONOCAP_THREADS")
    if n:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, n)


@dataclass
class RunConfig:
    command: str
    space: str | None = None
    fields: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    out: str | None = None
    format: str = "json"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        from .io import ConfigError
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="monocap", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("space", help="build or inspect a space file")
    ssub = sp.add_subparsers(dest="action", required=True, parser_class=_Parser)
    b = ssub.add_parser("build")
    b.add_argument("--kind", required=True, choices=["lattice", "cylinder", "cone", "radial", "path"])
    b.add_argument("--n", dest="N", type=float, default=3)
    b.add_argument("--extent", type=float, default=8.0)
    b.add_argument("--h", type=float, default=0.5)
    b.add_argument("--circumference", type=float, default=2 * math.pi)
    b.add_argument("--length", type=float, default=20.0)
    b.add_argument("--cross-section", default='{"sphereRadiusFactor": 1.0}',
                   help="JSON: circleAngle, sphereRadiusFactor or graph")
    b.add_argument("--r-min", type=float, default=0.5)
    b.add_argument("--r-max", type=float, default=8.0)
    b.add_argument("--radial-steps", type=int, default=40)
    b.add_argument("--vertices", type=int, default=11, help="path graph size")
    b.add_argument("--bump-amplitude", type=float, default=0.0)
    b.add_argument("--bump-centers", default="[]", help="JSON list of chart points")
    b.add_argument("--bump-sigma", type=float, default=1.0)
    b.add_argument("--out", required=True)
    i = ssub.add_parser("info")
    i.add_argument("--space", required=True)
    i.add_argument("--out")

    so = sub.add_parser("solve", help="exterior or obstacle problems")
    osub = so.add_subparsers(dest="action", required=True, parser_class=_Parser)
    e = osub.add_parser("exterior")
    e.add_argument("--space", required=True)
    e.add_argument("--omega-c", required=True, help="vertex set JSON of the obstacle complement")
    e.add_argument("--rout", type=float, default=math.inf)
    e.add_argument("--tol", type=float, default=1e-10)
    e.add_argument("--far-field", choices=["zero", "monopole"], default="zero")
    e.add_argument("--out", required=True)
    o = osub.add_parser("obstacle")
    o.add_argument("--space", required=True)
    o.add_argument("--e", required=True)
    o.add_argument("--b", required=True)
    o.add_argument("--tol", type=float, default=1e-8)
    o.add_argument("--method", choices=["psor", "active-set"], default="psor")
    o.add_argument("--out", required=True)

    g = sub.add_parser("green")
    g.add_argument("--space", required=True)
    g.add_argument("--pole", type=int, required=True)
    g.add_argument("--method", choices=["shell", "time"], default="shell")
    g.add_argument("--rout", type=float)
    g.add_argument("--tmax", type=float, default=16.0)
    g.add_argument("--tsplit", type=float, default=0.25)
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--out", required=True)

    pa = sub.add_parser("parabolicity")
    pa.add_argument("--space", required=True)
    pa.add_argument("--center", type=int)
    pa.add_argument("--smax", type=float)
    pa.add_argument("--out")

    m = sub.add_parser("monotone")
    m.add_argument("--space", required=True)
    m.add_argument("--field", required=True)
    m.add_argument("--beta", type=float, required=True)
    m.add_argument("--tgrid", default="0.2:0.8:13")
    m.add_argument("--estimator", choices=["cutEdge", "mollified"], default="cutEdge")
    m.add_argument("--out", required=True)

    c = sub.add_parser("cone", help="rigidity, cosine law and cross-section diagnostics")
    csub = c.add_subparsers(dest="action", required=True, parser_class=_Parser)
    r = csub.add_parser("rigidity")
    r.add_argument("--space", required=True)
    r.add_argument("--field", required=True)
    r.add_argument("--n", dest="N", type=float)
    r.add_argument("--band", default="0.25:0.4", help="u-range lo:hi of the region")
    r.add_argument("--out", required=True)
    cc = csub.add_parser("cosine")
    cc.add_argument("--space", required=True)
    cc.add_argument("--field", required=True, help="harmonic potential u")
    cc.add_argument("--n", dest="N", type=float)
    cc.add_argument("--band", default="0.25:0.4")
    cc.add_argument("--pairs", type=int, default=200)
    cc.add_argument("--locality", type=float)
    cc.add_argument("--seed", type=int, default=0)
    cc.add_argument("--out", required=True)
    cs = csub.add_parser("cross-section")
    cs.add_argument("--space", required=True)
    cs.add_argument("--field", required=True, help="harmonic potential u")
    cs.add_argument("--n", dest="N", type=float)
    cs.add_argument("--level", type=float, required=True, help="level T of the cone potential")
    cs.add_argument("--samples", type=int, default=200)
    cs.add_argument("--seed", type=int, default=0)
    cs.add_argument("--out", required=True)

    k = sub.add_parser("kato")
    k.add_argument("--n", default="2,3,4,5,6", help="matrix sizes, comma separated")
    k.add_argument("--trials", type=int, default=100_000)
    k.add_argument("--tgrid", default="0.1,1,10")
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--out")

    f = sub.add_parser("flow")
    f.add_argument("--space", required=True)
    f.add_argument("--field", required=True)
    f.add_argument("--start", type=int, required=True)
    f.add_argument("--tend", type=float, required=True)
    f.add_argument("--tol", type=float)
    f.add_argument("--out", required=True)

    pl = sub.add_parser("pipeline", help="exterior solve, monotone reports, rigidity and cosine law")
    pl.add_argument("--space", required=True)
    pl.add_argument("--omega-c", required=True)
    pl.add_argument("--rout", type=float, default=math.inf)
    pl.add_argument("--betas", default="auto", help="comma separated; auto = critical beta for N, then 1,2,3")
    pl.add_argument("--tgrid", default="0.2:0.8:13")
    pl.add_argument("--pairs", type=int, default=200)
    pl.add_argument("--seed", type=int, default=0)
    pl.add_argument("--out", required=True)

    rr = sub.add_parser("rerun", help="replay the run recorded in a manifest")
    rr.add_argument("--manifest", required=True)
    rr.add_argument("--out", help="write here instead of the recorded output path")
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    params = {k: v for k, v in vars(ns).items() if k not in ("command", "space", "field", "out")}
    command = ns.command + (f" {ns.action}" if getattr(ns, "action", None) else "")
    out = getattr(ns, "out", None)
    fmt = "csv" if out and str(out).endswith(".csv") else "json"
    fields = [ns.field] if getattr(ns, "field", None) else []
    return RunConfig(command, getattr(ns, "space", None), fields, params, out, fmt)


def _validate(cfg: RunConfig):
    from .io import ConfigError, check_exists
    if cfg.space:
        check_exists(cfg.space)
    for f in cfg.fields:
        check_exists(f)
    for key in ("omega_c", "e", "b"):
        if cfg.params.get(key):
            check_exists(cfg.params[key])
    for key in ("tol", "trials", "samples", "pairs"):
        v = cfg.params.get(key)
        if v is not None and v <= 0:
            raise ConfigError(f"--{key} must be positive")


def _manifest(cfg: RunConfig, started: float, extra: dict | None = None, outputs=(), out=None):
    from .io import write_manifest
    write_manifest(out or cfg.out, cfg.command, {**cfg.params, **(extra or {})}, started, outputs,
                   config=asdict(cfg))


def _emit(cfg: RunConfig, obj, started: float):
    from .io import dumps, write_json
    if cfg.out:
        write_json(cfg.out, obj)
        _manifest(cfg, started)
    else:
        sys.stdout.write(dumps(obj))


_PATH_PARAMS = ("omega_c", "e", "b")


def config_from_manifest(path, out: str | None = None) -> RunConfig:
    """Rebuild the RunConfig recorded in a manifest; relative paths resolve against the recorded cwd."""
    from .io import ConfigError, read_json
    record = read_json(path)
    if "config" not in record:
        raise ConfigError(f"{path}: manifest carries no run configuration")
    base = Path(record.get("cwd", "."))
    at = lambda p: None if p is None else str(base / p)
    c = record["config"]
    params = dict(c["params"])
    for key in _PATH_PARAMS:
        if params.get(key):
            params[key] = at(params[key])
    return RunConfig(c["command"], at(c["space"]), [at(f) for f in c["fields"]], params,
                     out if out is not None else at(c["out"]), c.get("format", "json"))


# -- pipeline -----------------------------------------------------------------------

class StageError(Exception):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f"stage={stage}: {error}")
        self.stage = stage
        self.error = error


def _stage(name, fn, *a, **kw):
    from .errors import MonocapError
    try:
        return fn(*a, **kw)
    except MonocapError as exc:
        raise type(exc)(f"stage={name}: {exc}") from exc


def local_pairs(space, region, count: int, locality: float, seed: int = 0):
    """Random vertex pairs inside region at distance in (locality/4, locality]."""
    import numpy as np
    from .errors import PreconditionError
    rng = np.random.default_rng(seed)
    cand = np.flatnonzero(region)
    if len(cand) < 2:
        raise PreconditionError("too few vertices for cosine pairs")
    pairs = []
    for a in rng.choice(cand, size=min(count, len(cand)), replace=False):
        d = space.point_distance(space.positions[cand], space.positions[a])
        near = cand[(d > locality / 4) & (d <= locality)]
        if len(near):
            pairs.append((int(a), int(rng.choice(near))))
    return pairs


def _band(text):
    from .io import ConfigError
    try:
        lo, hi = (float(x) for x in text.split(":"))
    except ValueError as exc:
        raise ConfigError(f"band {text!r} must look like lo:hi") from exc
    return lo, hi


def pipeline_cone_report(space, omega_c, r_out: float = math.inf, betas=None, t_grid=None,
                         band=(0.25, 0.4), pairs: int = 200, seed: int = 0, center: int | None = None) -> dict:
    """Exterior potential, monotone reports per beta, rigidity residuals and the cosine law, as one dict."""
    import numpy as np
    from .cone import cone_potential, cosine_check, rigidity_residual
    from .errors import PreconditionError
    from .green import nonparabolic_test
    from .mmspace import RadialField
    from .monotone import critical_beta, monotonicity_report
    from .potential import ExteriorProblemSpec, solve_exterior

    if betas is None:
        betas = (critical_beta(space.N), 1.0, 2.0, 3.0) if space.N > 2 else (1.0, 2.0, 3.0)
    t_grid = np.linspace(0.2, 0.8, 13) if t_grid is None else np.asarray(t_grid, dtype=float)
    report: dict = {"space": space.label, "N": space.N}
    if space.N <= 2:
        raise PreconditionError(f"stage=parabolicity: N = {space.N:g} <= 2, the space is parabolic")
    gate = _stage("parabolicity", nonparabolic_test, space, center)
    report["parabolicity"] = gate.__dict__
    if gate.classification != "nonparabolic":
        raise PreconditionError(f"stage=parabolicity: classified {gate.classification} ({gate.reason})")
    radial = space.is_radial
    spec = ExteriorProblemSpec(space, None if radial else omega_c, r_out, center)
    u = _stage("exterior", solve_exterior, spec, far_field="monopole")
    if not radial:
        report["exterior"] = dict(u.meta)
    reports = {}
    for beta in betas:
        rep = _stage(f"monotone(beta={beta:g})", monotonicity_report, u, beta, t_grid)
        reports[f"{beta:g}"] = rep.to_dict()
    report["monotone"] = reports
    if radial:
        rig = _stage("rigidity", rigidity_residual, u)
        bold = cone_potential(u)
        rng = np.random.default_rng(seed)
        dim = max(2, int(round(space.N)))
        P = rng.normal(size=(pairs, dim))
        rlo, rhi = (float(u.inverse(b)) for b in (band[1], band[0]))
        P *= rng.uniform(rlo, rhi, (pairs, 1)) / np.linalg.norm(P, axis=1)[:, None]
        Q = P + rng.normal(size=P.shape) * 0.05 * rlo
        T = float(bold(0.5 * (rlo + rhi)))
        cos = _stage("cosine", cosine_check, bold, T, list(zip(P, Q)), locality=0.5 * rlo)
    else:
        region = u.mask & (u.values > band[0]) & (u.values < band[1])
        rig = _stage("rigidity", rigidity_residual, u, space.N, region)
        bold = cone_potential(u, space.N, rig.normalization)
        T = float(np.median(bold.values[region]))
        loc = 4 * float(space.length.max())
        pl = local_pairs(space, region, pairs, loc, seed)
        cos = _stage("cosine", cosine_check, bold, T, pl, locality=loc)
    report["rigidity"] = {**rig.__dict__, "isCone": rig.is_cone()}
    report["cosine"] = {**cos, "level": T}
    report["monotoneAll"] = all(r["monotone"] for r in reports.values())
    return report


# -- dispatch -------------------------------------------------------------------------

def _build_space(p: dict):
    import numpy as np
    from .io import ConfigError
    from .mmspace import (Space, build_cone, build_cylinder, build_lattice, build_radial,
                          bump_density)
    kind = p["kind"]
    if kind == "lattice":
        space = build_lattice(int(p["N"]), p["extent"], p["h"])
    elif kind == "cylinder":
        space = build_cylinder(p["circumference"], p["length"], p["h"])
    elif kind == "cone":
        try:
            section = json.loads(p["cross_section"])
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--cross-section is not JSON ({exc.msg})") from exc
        space = build_cone(p["N"], section, p["r_min"], p["r_max"], p["radial_steps"])
    elif kind == "radial":
        space = build_radial(p["N"], p["r_min"], p["r_max"])
    else:
        n = p["vertices"]
        if n < 2:
            raise ConfigError("--vertices must be at least 2")
        space = Space("graph", 1, label=f"path-{n}", measure=np.ones(n),
                      edges=np.stack([np.arange(n - 1), np.arange(1, n)], axis=1),
                      weight=np.ones(n - 1), length=np.ones(n - 1),
                      positions=np.arange(n, dtype=float)[:, None], metric={"kind": "euclidean"})
    if p["bump_amplitude"]:
        space = bump_density(space, p["bump_amplitude"], json.loads(p["bump_centers"]), p["bump_sigma"])
    return space


def dispatch(cfg: RunConfig) -> int:
    """Run one command; returns 0 or raises the error mapped to an exit code by main."""
    import numpy as np
    from . import io as mio
    started = time.time()
    _validate(cfg)
    p = cfg.params
    cmd = cfg.command
    space = mio.load_space(cfg.space) if cfg.space else None

    if cmd == "space build":
        space = _build_space(p)
        mio.save_space(cfg.out, space, build={k: v for k, v in p.items() if k != "out"})
        _manifest(cfg, started)
    elif cmd == "space info":
        info = {"label": space.label, "backend": space.backend, "N": space.N,
                "totalMeasure": space.total_measure}
        if not space.is_radial:
            info.update(vertices=space.n, edges=len(space.edges), boundary=int(space.boundary.sum()),
                        maxEdgeLength=float(space.length.max()))
        _emit(cfg, info, started)
    elif cmd == "solve exterior":
        from .potential import ExteriorProblemSpec, solve_exterior
        omega = None if space.is_radial else mio.load_vertex_set(p["omega_c"], space)
        u = solve_exterior(ExteriorProblemSpec(space, omega, p["rout"]), tol=p["tol"], far_field=p["far_field"])
        mio.save_field(cfg.out, u)
        extra = {"meta": getattr(u, "meta", {})}
        _manifest(cfg, started, extra)
    elif cmd == "solve obstacle":
        from .potential import solve_obstacle, solve_obstacle_active_set
        E = mio.load_vertex_set(p["e"], space)
        B = mio.load_vertex_set(p["b"], space)
        if p["method"] == "psor":
            res = solve_obstacle(space, E, B, tol=p["tol"])
        else:
            res = solve_obstacle_active_set(space, E, B)
        out = Path(cfg.out)
        pot = out.with_name(out.stem + ".potential" + (".json" if space.is_radial else ".csv"))
        mio.save_field(pot, res.potential)
        mio.write_json(out, {"capacity": res.capacity, "iterations": res.iterations,
                             "residual": res.residual, "potentialFile": pot.name})
        _manifest(cfg, started, outputs=[out, pot])
    elif cmd == "green":
        from .green import HeatKernelEngine, green_function, green_shell
        if p["method"] == "shell":
            G = green_shell(space, p["pole"], p["rout"])
        else:
            G = green_function(HeatKernelEngine(space), p["pole"], p["tsplit"], p["tmax"], tol=p["tol"])
        mio.save_field(cfg.out, G)
        _manifest(cfg, started)
    elif cmd == "parabolicity":
        from .green import nonparabolic_test
        _emit(cfg, nonparabolic_test(space, p["center"], p["smax"]).__dict__, started)
    elif cmd == "monotone":
        from .monotone import monotonicity_report
        u = mio.load_field(cfg.fields[0], space)
        rep = monotonicity_report(u, p["beta"], mio.parse_grid(p["tgrid"]), estimator=p["estimator"])
        mio.write_rows(cfg.out, ["t", "U", "Uprime_flux", "Uprime_fd", "lower_bound"], rep.rows())
        summary = {k: v for k, v in rep.to_dict().items() if k not in ("t_grid", "U", "Uprime_flux", "Uprime_fd",
                                                                        "lower_bound", "U_cut")}
        _manifest(cfg, started, {"summary": summary})
    elif cmd == "cone rigidity":
        from .cone import rigidity_residual
        u = mio.load_field(cfg.fields[0], space)
        if space.is_radial:
            res = rigidity_residual(u, p["N"])
        else:
            lo, hi = _band(p["band"])
            res = rigidity_residual(u, p["N"], u.mask & (u.values > lo) & (u.values < hi))
        _emit(cfg, {**res.__dict__, "isCone": res.is_cone()}, started)
    elif cmd == "cone cosine":
        from .cone import cone_potential, cosine_check, rigidity_residual
        u = mio.load_field(cfg.fields[0], space)
        if space.is_radial:
            raise mio.ConfigError("use the pipeline command for radial spaces")
        lo, hi = _band(p["band"])
        region = u.mask & (u.values > lo) & (u.values < hi)
        rig = rigidity_residual(u, p["N"], region)
        bold = cone_potential(u, p["N"], rig.normalization)
        loc = p["locality"] or 4 * float(space.length.max())
        T = float(np.median(bold.values[region]))
        out = cosine_check(bold, T, local_pairs(space, region, p["pairs"], loc, p["seed"]), locality=loc)
        _emit(cfg, {**out, "level": T, "tolerance": rig.tolerance}, started)
    elif cmd == "cone cross-section":
        from .cone import cone_potential, cross_section, dd_prime_check
        u = mio.load_field(cfg.fields[0], space)
        bold = cone_potential(u, p["N"])
        sample = cross_section(bold, p["level"], p["samples"], seed=p["seed"])
        _emit(cfg, {**dd_prime_check(sample), "pairs": len(sample.pairs),
                    "rescaledMax": float(sample.rescaled.max())}, started)
    elif cmd == "kato":
        from .cone import kato_search
        out = kato_search(mio.parse_list(p["n"], int), p["trials"], mio.parse_list(p["tgrid"]), seed=p["seed"])
        _emit(cfg, {**out, "seed": p["seed"]}, started)
    elif cmd == "flow":
        from .flow import integrate_flow
        u = mio.load_field(cfg.fields[0], space)
        if space.is_radial:
            raise mio.ConfigError("flow from a vertex id needs a graph space")
        traj = integrate_flow(space, u, space.positions[p["start"]], p["tend"], tol=p["tol"])
        k = traj.points.shape[1]
        rows = [(t, *pt, uv) for t, pt, uv in zip(traj.times, traj.points, traj.u_values)]
        mio.write_rows(cfg.out, ["t"] + [f"x{i}" for i in range(k)] + ["u"], rows)
        _manifest(cfg, started, {"exited": traj.exited, "reason": traj.reason, "steps": traj.steps})
    elif cmd == "pipeline":
        omega = None if space.is_radial else mio.load_vertex_set(p["omega_c"], space)
        betas = None if p["betas"] == "auto" else mio.parse_list(p["betas"])
        rep = pipeline_cone_report(space, omega, p["rout"], betas,
                                   mio.parse_grid(p["tgrid"]), pairs=p["pairs"], seed=p["seed"])
        _emit(cfg, rep, started)
    else:
        raise mio.ConfigError(f"unknown command {cmd!r}")
    return 0


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(f"error code={code} kind={type(exc).__name__} message={json.dumps(str(exc))}\n")
    return code


def main(argv=None) -> int:
    _apply_threads()
    from .errors import PreconditionError, SolverError
    from .io import ConfigError
    try:
        ns = build_parser().parse_args(argv)
        if ns.command == "rerun":
            return dispatch(config_from_manifest(ns.manifest, ns.out))
        return dispatch(config_from_args(ns))
    except ConfigError as exc:
        return _fail(1, exc)
    except SolverError as exc:
        return _fail(2, exc)
    except PreconditionError as exc:
        return _fail(3, exc)


if __name__ == "__main__":
    sys.exit(main())
