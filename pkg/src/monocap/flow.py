"""Gradient flow of -grad u: trajectories, projection to a level set, and measure scaling laws.

The radial backend integrates the scalar ODE r' = -u'(r) along a ray. Graph
spaces with chart positions follow a continuous velocity field built by
interpolating least-squares vertex gradients (multilinear on lattices,
barycentric on unstructured meshes).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import RK45
from scipy.interpolate import LinearNDInterpolator, RegularGridInterpolator
from scipy.spatial import ConvexHull, Delaunay, cKDTree
from scipy.optimize import brentq

from .errors import PreconditionError
from .mmspace import RadialField, ScalarField, Space, cone_mesh_layout, gradient_vectors, stencil_mask

STAGNATION_FLOOR = 1e-12
RADIAL_TOL = 1e-8
GRAPH_TOL = 1e-5
EXIT_RESOLUTION = 1e-10


class _LeftDomain(Exception):
    pass


class _ShellInterpolator:
    """Interpolation on a built cone mesh: linear between shells, planar barycentric on the section.

    The section weights solve e = sum c_j e_j for the direction e and are
    normalized, so interpolating radial vectors returns a radial vector.
    """

    def __init__(self, space: Space, data: np.ndarray, shells: np.ndarray, nz: int):
        self.shells = shells
        self.nz = nz
        self.data = data.reshape((len(shells), nz) + data.shape[1:])
        dirs = space.positions[:nz] / shells[0]
        self.dirs = dirs
        if dirs.shape[1] == 3:
            simplices = ConvexHull(dirs).simplices
        else:
            ang = np.arctan2(dirs[:, 1], dirs[:, 0])
            order = np.argsort(ang)
            simplices = np.stack([order, np.roll(order, -1)], axis=1)
        self.simplices = simplices
        self.inverse = np.linalg.pinv(dirs[simplices].transpose(0, 2, 1))
        centers = dirs[simplices].mean(axis=1)
        self.tree = cKDTree(centers / np.linalg.norm(centers, axis=1)[:, None])

    def weights(self, P):
        P = np.atleast_2d(P)
        rho = np.linalg.norm(P, axis=1)
        e = P / np.maximum(rho, 1e-300)[:, None]
        k = min(12, len(self.simplices))
        _, cand = self.tree.query(e, k=k)
        cand = cand.reshape(len(P), -1)
        coef = np.einsum("nkij,nj->nki", self.inverse[cand], e)
        ok = np.all(coef >= -1e-10, axis=2) & (coef.sum(axis=2) > 0)
        first = np.argmax(ok, axis=1)
        found = ok[np.arange(len(P)), first]
        tri = cand[np.arange(len(P)), first]
        c = coef[np.arange(len(P)), first]
        c = c / c.sum(axis=1, keepdims=True)
        i = np.clip(np.searchsorted(self.shells, rho) - 1, 0, len(self.shells) - 2)
        lam = (rho - self.shells[i]) / (self.shells[i + 1] - self.shells[i])
        inside = found & (rho >= self.shells[0]) & (rho <= self.shells[-1])
        return self.simplices[tri], c, i, lam, inside

    def __call__(self, P):
        verts, c, i, lam, inside = self.weights(P)
        lo = np.einsum("nj,nj...->n...", c, self.data[i[:, None], verts])
        hi = np.einsum("nj,nj...->n...", c, self.data[i[:, None] + 1, verts])
        lam = lam.reshape((-1,) + (1,) * (lo.ndim - 1))
        out = (1 - lam) * lo + lam * hi
        out[~inside] = np.nan
        return out


class FieldInterpolant:
    """Continuous value and velocity -grad u at chart points of a graph field."""

    def __init__(self, u: ScalarField):
        space = u.space
        if space.positions is None:
            raise PreconditionError("flow on a graph needs chart positions")
        kind = space.metric.get("kind")
        if kind not in ("euclidean", "cone"):
            raise PreconditionError(f"flow is not supported for the {kind!r} metric")
        self.space = space
        self.kind = kind
        self.scale = space.metric.get("scale", 1.0)
        ok = stencil_mask(space, u.mask)
        vals = np.where(u.mask, u.values, 0.0)
        grads = u.derived("flow-gradient", lambda: gradient_vectors(space, vals))
        vals = np.where(u.mask, u.values, np.nan)
        grads = np.where(ok[:, None], grads, np.nan)
        layout = cone_mesh_layout(space)
        if layout is not None:
            self._value = _ShellInterpolator(space, vals, *layout)
            self._grad = _ShellInterpolator(space, grads, *layout)
        elif space.grid is not None:
            shape = tuple(space.grid["shape"])
            axes = [o + space.grid["h"] * np.arange(s) for o, s in zip(space.grid["origin"], shape)]
            self._value = RegularGridInterpolator(axes, vals.reshape(shape), bounds_error=False,
                                                  fill_value=np.nan)
            self._grad = RegularGridInterpolator(axes, grads.reshape(shape + (-1,)), bounds_error=False,
                                                 fill_value=np.nan)
        else:
            keep = np.flatnonzero(u.mask)
            tri = u.derived("flow-triangulation", lambda: Delaunay(space.positions[keep]))
            self._value = LinearNDInterpolator(tri, vals[keep])
            self._grad = LinearNDInterpolator(tri, grads[keep])

    def values(self, P) -> np.ndarray:
        return np.asarray(self._value(np.atleast_2d(P)), dtype=float).reshape(-1)

    def value(self, p) -> float:
        return float(self.values(p)[0])

    def gradient(self, p) -> np.ndarray:
        return np.asarray(self._grad(np.atleast_2d(p))[0], dtype=float)

    def metric_gradients(self, P) -> np.ndarray:
        """Gradient vectors (the covector raised by the metric) at each row of P."""
        G = np.asarray(self._grad(np.atleast_2d(P)), dtype=float)
        if self.kind == "cone" and self.scale != 1.0:
            P = np.atleast_2d(P)
            e = P / np.maximum(np.linalg.norm(P, axis=1), 1e-300)[:, None]
            radial = np.sum(G * e, axis=1)[:, None] * e
            G = radial + (G - radial) / self.scale ** 2
        return G

    def velocity(self, p) -> np.ndarray:
        return -self.metric_gradients(p)[0]


@dataclass
class Trajectory:
    start: np.ndarray
    times: np.ndarray
    points: np.ndarray
    u_values: np.ndarray
    steps: int = 0
    evaluations: int = 0
    exited: bool = False
    exit_time: float = math.nan
    reason: str = ""
    samples: dict = field(default_factory=dict)

    @property
    def end(self) -> np.ndarray:
        return self.points[-1]

    def path_length(self, space: Space) -> float:
        if space.is_radial:
            r = np.linalg.norm(self.points.reshape(len(self.points), -1), axis=1)
            return float(np.sum(np.abs(np.diff(r))))
        return float(np.sum(space.point_distance(self.points[1:], self.points[:-1])))


def _radial_setup(u: RadialField, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    r0 = float(np.linalg.norm(x))
    direction = x / r0 if r0 > 0 else x
    space = u.space
    value = lambda r: float(u(r[0]))

    def velocity(r):
        if not (space.r_min <= r[0] <= space.r_max):
            raise _LeftDomain("left the radial range")
        return np.array([-float(u.d1(r[0]))])
    return np.array([r0]), direction, value, velocity


def integrate_flow(space: Space, u, x, t_end: float, tol: float | None = None, band=None,
                   t_eval=None, stop_level: float | None = None, interpolant: FieldInterpolant | None = None
                   ) -> Trajectory:
    """Follow x' = -grad u from x for time t_end (negative times flow up the gradient).

    band=(lo, hi) bounds the region by u-values; leaving it, the space, or the
    field's domain ends the trajectory early with exited=True. stop_level ends
    the path where u crosses that value. t_eval lists times whose points are
    stored in samples via dense output.
    """
    sign = 1.0 if t_end >= 0 else -1.0
    horizon = abs(float(t_end))
    if isinstance(u, RadialField):
        y0, direction, value, vel = _radial_setup(u, x)
        tol = RADIAL_TOL if tol is None else tol
        embed = lambda y: y[0] * direction
    else:
        if not isinstance(u, ScalarField):
            raise PreconditionError("u must be a RadialField or ScalarField")
        interp = interpolant or FieldInterpolant(u)
        y0 = np.asarray(x, dtype=float).copy()
        tol = GRAPH_TOL if tol is None else tol

        def value(y):
            return interp.value(y)

        def vel(y):
            v = interp.velocity(y)
            if not np.all(np.isfinite(v)):
                raise _LeftDomain("left the solved region")
            return v
        embed = lambda y: y.copy()

    u0 = value(y0)
    if not np.isfinite(u0):
        raise PreconditionError("start point lies outside the solved region")
    if band is not None and not (band[0] < u0 < band[1]):
        raise PreconditionError(f"u(x) = {u0:.6g} lies outside the band {tuple(band)}")
    if np.linalg.norm(vel(y0)) < STAGNATION_FLOOR:
        raise PreconditionError("gradient vanishes at the start point")

    def rhs(_t, y):
        return sign * vel(y)

    events = []
    if band is not None:
        events += [lambda y: value(y) - band[0], lambda y: band[1] - value(y)]
    if stop_level is not None:
        s0 = np.sign(u0 - stop_level)
        events.append(lambda y: s0 * (value(y) - stop_level))
    pending = sorted(abs(float(s)) for s in (t_eval or []))
    samples = {}
    times, pts, vals = [0.0], [embed(y0)], [u0]
    exited, exit_time, reason = False, math.nan, ""
    if horizon == 0:
        samples = {s: embed(y0) for s in pending}
        return Trajectory(np.asarray(embed(y0)), np.array(times), np.array(pts), np.array(vals), samples=samples)
    solver = RK45(rhs, 0.0, y0, horizon, rtol=tol, atol=tol * 1e-2)
    steps = nfev = 0
    while solver.status == "running":
        t_prev, y_prev = solver.t, solver.y.copy()
        try:
            msg = solver.step()
        except _LeftDomain as exc:
            # retry from the last accepted state with shorter steps until the exit is pinned down
            h = solver.h_abs / 4
            if h > EXIT_RESOLUTION * max(1.0, t_prev):
                nfev += solver.nfev
                solver = RK45(rhs, t_prev, y_prev, horizon, rtol=tol, atol=tol * 1e-2, first_step=h, max_step=h)
                continue
            exited, exit_time, reason = True, sign * t_prev, str(exc)
            break
        if solver.status == "failed":
            exited, exit_time, reason = True, sign * t_prev, f"integrator failure: {msg}"
            break
        steps += 1
        dense = solver.dense_output()
        hit = None
        for g in events:
            try:
                g0, g1 = g(y_prev), g(solver.y)
            except _LeftDomain:
                continue
            if g0 > 0 and not g1 > 0:
                tc = brentq(lambda s: g(dense(s)), t_prev, solver.t, xtol=1e-14, rtol=1e-15) \
                    if np.isfinite(g1) else solver.t
                hit = tc if hit is None else min(hit, tc)
        t_now = solver.t if hit is None else hit
        y_now = solver.y if hit is None else dense(hit)
        while pending and pending[0] <= t_now:
            s = pending.pop(0)
            samples[sign * s] = embed(dense(s) if s > t_prev else y_prev)
        u_now = value(y_now)
        if not np.isfinite(u_now):
            exited, exit_time, reason = True, sign * t_prev, "left the solved region"
            break
        times.append(sign * t_now)
        pts.append(embed(y_now))
        vals.append(u_now)
        if hit is not None:
            exited = True
            exit_time = sign * hit
            reason = "reached the stop level" if stop_level is not None and abs(u_now - stop_level) < 1e-6 * max(1, abs(stop_level)) else "left the band"
            break
        try:
            speed = float(np.linalg.norm(vel(y_now)))
        except _LeftDomain as exc:
            exited, exit_time, reason = True, sign * t_now, str(exc)
            break
        if speed < STAGNATION_FLOOR:
            exited, exit_time, reason = True, sign * t_now, "stagnation"
            break
    return Trajectory(np.asarray(embed(y0)), np.array(times), np.array(pts), np.array(vals), steps,
                      nfev + solver.nfev, exited, exit_time, reason, samples)


@dataclass
class Projection:
    point: np.ndarray
    flow_time: float
    value: float


def projection(space: Space, u, T: float, x, tol: float | None = None,
               interpolant: FieldInterpolant | None = None) -> Projection:
    """Flow x to the level {u = T}; the nominal time is log(u(x)/T) / 2."""
    if T <= 0:
        raise PreconditionError("level T must be positive")
    if isinstance(u, RadialField):
        ux = float(u(np.linalg.norm(x)))
    else:
        interpolant = interpolant or FieldInterpolant(u)
        ux = interpolant.value(x)
    if not np.isfinite(ux) or ux <= 0:
        raise PreconditionError("u must be positive at the start point")
    t_star = 0.5 * math.log(ux / T)
    if abs(ux - T) <= 1e-15 * T:
        return Projection(np.asarray(x, dtype=float), 0.0, ux)
    # integrate past the nominal time and stop on the level itself
    traj = integrate_flow(space, u, x, 2 * t_star + math.copysign(0.5, t_star), tol=tol,
                          stop_level=T, interpolant=interpolant)
    if traj.reason != "reached the stop level":
        raise PreconditionError(f"flow left the region before reaching u = {T}: {traj.reason or 'time exhausted'}")
    return Projection(traj.end, traj.exit_time, float(traj.u_values[-1]))


def project_points(space: Space, u, T: float, X, values=None, tol: float | None = None,
                   interpolant: FieldInterpolant | None = None, polish: int = 3) -> np.ndarray:
    """Projections of many points to {u = T}, integrated as one system.

    Each point i flows for its nominal time s_i = log(u(x_i)/T) / 2 via the
    rescaled system y_i' = -s_i grad u(y_i) on [0, 1]; a few Newton steps
    along grad u then put the end points on the level of the interpolated u.
    values overrides u(x_i) (e.g. exact vertex values).
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(u, RadialField):
        return np.array([projection(space, u, T, x, tol=tol).point for x in X])
    interp = interpolant or FieldInterpolant(u)
    ux = interp.values(X) if values is None else np.asarray(values, dtype=float)
    if np.any(~np.isfinite(ux)) or np.any(ux <= 0):
        raise PreconditionError("u must be positive at every start point")
    s = 0.5 * np.log(ux / T)
    n, k = X.shape
    tol = GRAPH_TOL if tol is None else tol

    def rhs(_t, y):
        G = interp.metric_gradients(y.reshape(n, k))
        if not np.all(np.isfinite(G)):
            raise PreconditionError("flow left the solved region before reaching the level")
        return (-s[:, None] * G).ravel()
    solver = RK45(rhs, 0.0, X.ravel().copy(), 1.0, rtol=tol, atol=tol * 1e-2)
    while solver.status == "running":
        solver.step()
    if solver.status == "failed":
        raise PreconditionError("projection integrator failed")
    Y = solver.y.reshape(n, k)
    for _ in range(polish):
        G = interp.metric_gradients(Y)
        raw = np.asarray(interp._grad(Y), dtype=float)
        slope = np.sum(raw * G, axis=1)
        Y = Y - ((interp.values(Y) - T) / np.where(slope != 0, slope, np.inf))[:, None] * G
    return Y


# -- measure laws ---------------------------------------------------------------

def cell_intervals(u: ScalarField) -> tuple[np.ndarray, np.ndarray]:
    """Range of u over each vertex cell, from the midpoints of its edges to solved neighbours."""
    space = u.space
    vals = u.values
    lo = np.where(u.mask, vals, np.nan).copy()
    hi = lo.copy()
    a, b = space.edges[:, 0], space.edges[:, 1]
    both = u.mask[a] & u.mask[b]
    mid = 0.5 * (vals[a[both]] + vals[b[both]])
    for end in (a[both], b[both]):
        np.fmin.at(lo, end, mid)
        np.fmax.at(hi, end, mid)
    return lo, hi


def _spread_cdf(u: ScalarField, s: np.ndarray) -> np.ndarray:
    """m({u < s}) with each vertex measure spread uniformly over its cell interval."""
    lo, hi = u.derived("cell-intervals", lambda: cell_intervals(u))
    keep = u.mask
    lo, hi, mu = lo[keep], hi[keep], u.space.measure[keep]
    width = hi - lo
    s = np.atleast_1d(np.asarray(s, dtype=float))
    frac = np.where(width[None, :] > 0,
                    np.clip((s[:, None] - lo[None, :]) / np.where(width > 0, width, 1.0)[None, :], 0, 1),
                    (s[:, None] > lo[None, :]).astype(float))
    return frac @ mu


def annulus_measure(space: Space, u, lo: float, hi: float, quadrature: str = "cell") -> tuple[float, int]:
    """m({lo < u < hi}) and the number of vertices it uses.

    quadrature="cell" spreads each vertex measure over its cell's u-range,
    "vertex" counts whole vertex measures.
    """
    if isinstance(u, RadialField):
        r = sorted((u.inverse(lo), u.inverse(hi)))
        N = space.N
        return space.cross_section_mass * (r[1] ** N - r[0] ** N) / N, 0
    sel = u.mask & (u.values > lo) & (u.values < hi)
    if quadrature == "vertex":
        return float(space.measure[sel].sum()), int(sel.sum())
    if quadrature != "cell":
        raise PreconditionError(f"unknown quadrature {quadrature!r}")
    c = _spread_cdf(u, np.array([lo, hi]))
    return float(c[1] - c[0]), int(sel.sum())


def measure_pushforward_check(space: Space, u, t: float, annulus, min_vertices: int = 50,
                              quadrature: str = "cell") -> dict:
    """Compare m(A(e^{2t} a, b)) / m(A(a, e^{-2t} b)) with e^{N t}."""
    a, b = map(float, annulus)
    if not (0 < a < b):
        raise PreconditionError("annulus needs 0 < a < b")
    if t < 0 or math.exp(2 * t) * a >= b:
        raise PreconditionError("flow time too long for the annulus")
    top, n1 = annulus_measure(space, u, math.exp(2 * t) * a, b, quadrature)
    bottom, n2 = annulus_measure(space, u, a, math.exp(-2 * t) * b, quadrature)
    if not isinstance(u, RadialField) and min(n1, n2) < min_vertices:
        raise PreconditionError(f"annuli under-resolved ({min(n1, n2)} vertices)")
    ratio = top / bottom
    expected = math.exp(space.N * t)
    return {"ratio": ratio, "expected": expected, "relativeError": abs(ratio / expected - 1)}


def disintegration_histogram(space: Space, u, annulus, bins: int = 20, N: float | None = None,
                             quadrature: str = "cell") -> dict:
    """Measure-weighted histogram of u on an annulus and its KS distance to the density c s^(N/2-1)."""
    a, b = map(float, annulus)
    if not (0 <= a < b):
        raise PreconditionError("annulus needs 0 <= a < b")
    N = space.N if N is None else N
    k = N / 2
    model_cdf = lambda s: (np.asarray(s) ** k - a ** k) / (b ** k - a ** k)
    edges = np.linspace(a, b, bins + 1)
    fine = np.linspace(a, b, 2001)
    if isinstance(u, RadialField):
        mass = lambda s: np.abs(np.array([u.inverse(x) for x in np.atleast_1d(s)]) ** space.N)
        cum = lambda s: mass(s) - mass(a)
    elif quadrature == "cell":
        cum = lambda s: _spread_cdf(u, s) - _spread_cdf(u, a)[0]
    elif quadrature == "vertex":
        sel = u.mask & (u.values > a) & (u.values < b)
        vals, mu = u.values[sel], space.measure[sel]
        order = np.argsort(vals)
        sv, cw = vals[order], np.cumsum(mu[order])
        cum = lambda s: np.r_[0.0, cw][np.searchsorted(sv, s, side="right")]
        fine = np.unique(np.r_[fine, sv, np.nextafter(sv, -np.inf)])
    else:
        raise PreconditionError(f"unknown quadrature {quadrature!r}")
    total = float(cum(np.array([b]))[0])
    if total <= 0:
        raise PreconditionError("annulus carries no measure")
    hist = np.diff(cum(edges))
    empty = int(np.sum(hist <= 0))
    if empty > 0.1 * bins:
        raise PreconditionError(f"{empty} of {bins} bins are empty")
    ks = float(np.max(np.abs(cum(fine) / total - model_cdf(fine))))
    return {"edges": edges, "density": hist / (total * np.diff(edges)), "ksDistance": ks, "emptyBins": empty}
