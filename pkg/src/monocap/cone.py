"""Cone geometry, rigidity residuals, the local cosine law and the Kato matrix inequality."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csgraph

from .errors import PreconditionError
from .mmspace import (RadialField, ScalarField, Space, cone_distance, cone_measure_density,
                      covector_norm, gradient_norm_values, gradient_vectors, stencil_mask)
from .monotone import harmonic_exponent_constant

__all__ = ["cone_distance", "cone_measure_density", "RigidityResidual", "rigidity_residual",
           "mesh_tolerance", "cone_potential", "cosine_check", "cross_section", "dd_prime_check", "kato_check",
           "kato_search", "harmonic_exponent_constant", "extension_radius"]


@dataclass
class RigidityResidual:
    laplacian_sup: float
    laplacian_l2: float
    eikonal_sup: float
    eikonal_l2: float
    normalization: float
    vertices: int = 0
    tolerance: float = math.nan
    notes: list = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.laplacian_sup, self.eikonal_sup)

    def is_cone(self, tolerance: float | None = None) -> bool:
        tol = self.tolerance if tolerance is None else tolerance
        return self.worst <= tol


def mesh_tolerance(space: Space, region: np.ndarray | None = None, center: np.ndarray | None = None,
                   factor: float = 2.0) -> float:
    """Residual allowance factor * max (edge length / distance)^2 over edges touching the region.

    Distances are measured from the cone tip (or from center). This is the
    size of the consistency error of second-order stencils applied to a
    radial quadratic; radial spaces get a round-off allowance.
    """
    if space.is_radial:
        return 1e-10
    region = np.ones(space.n, dtype=bool) if region is None else region
    a, b = space.edges[:, 0], space.edges[:, 1]
    ends = region[a] | region[b]
    c = np.zeros(space.positions.shape[1]) if center is None else np.asarray(center, dtype=float)
    mid = 0.5 * (space.positions[a[ends]] + space.positions[b[ends]])
    ratio = space.length[ends] / np.linalg.norm(mid - c, axis=1)
    return factor * float(ratio.max()) ** 2


def _graph_rigidity(u: ScalarField, N: float, region: np.ndarray | None, bold: np.ndarray | None,
                    gradient: str):
    space = u.space
    if gradient == "auto":
        gradient = "lsq" if space.grid is not None else "edge"
    notes = []
    mask = u.mask.copy()
    if bold is None:
        if N <= 2:
            raise PreconditionError("the substitution v = u^(1/(2-N)) needs N > 2")
        if np.any(u.values[mask] <= 0):
            raise PreconditionError("u must be positive on its domain")
        v = np.where(mask, u.values, 1.0) ** (1.0 / (2 - N))
    else:
        v = np.sqrt(2 * np.maximum(np.asarray(bold, dtype=float), 0.0))
    ok1 = stencil_mask(space, mask)
    ok2 = stencil_mask(space, ok1)
    if region is None:
        region = ok2
    else:
        region = np.asarray(region, dtype=bool)
        trimmed = region & ~ok2
        if trimmed.any():
            notes.append(f"trimmed {int(trimmed.sum())} vertices with contaminated stencils")
        region = region & ok2
    if not region.any():
        raise PreconditionError("rigidity region is empty after trimming")
    mu = space.measure[region]
    # |grad v|^2 = |grad v^2|^2 / (4 v^2): stencils act on v^2, which is quadratic on exact cones
    w = np.where(mask, v * v, 0.0)
    if gradient == "lsq":
        gw = covector_norm(space, gradient_vectors(space, w))
    else:
        gw = gradient_norm_values(space, w)
    g2 = gw ** 2 / (4 * np.where(w > 0, w, np.inf))
    C0 = float(np.sum(mu * g2[region]) / np.sum(mu)) if bold is None else 1.0
    bold_u = w / (2 * C0)
    lap = -(space.stiffness @ bold_u) / space.measure
    lres = np.abs(lap[region] - N)
    eres = np.abs(g2[region] / C0 - 1.0)
    l2 = lambda r: float(math.sqrt(np.sum(mu * r * r) / np.sum(mu)))
    return RigidityResidual(float(lres.max() / N), l2(lres) / N, float(eres.max()), l2(eres), C0,
                            int(region.sum()), notes=notes)


def rigidity_residual(u, N: float | None = None, region: np.ndarray | None = None,
                      bold_u: np.ndarray | None = None, tolerance: float | None = None,
                      gradient: str = "auto") -> RigidityResidual:
    """Residuals of Laplacian(bold u) = N and |grad sqrt(2 bold u)|^2 = 1 with bold u = v^2 / (2 C0).

    v = u^(1/(2-N)) and C0 is the measure-weighted mean of |grad v|^2 over the
    region. The Laplacian residual is reported relative to N. Passing bold_u
    checks a candidate directly. gradient="auto" uses central least-squares
    differences on lattices and the Dirichlet-form norm on other meshes.
    """
    if isinstance(u, RadialField):
        s = u.space
        Nn = s.N if N is None else N
        r = np.geomspace(s.r_min, s.r_max, 257)
        p = 1.0 / (2 - Nn)
        r = r[u(r) > 0]
        uu = u(r)
        dv = p * uu ** (p - 1) * u.d1(r)
        C0 = float(np.mean(dv ** 2))
        # v = c r exactly when u is a multiple of r^(2-N); evaluate bold u = v^2/(2 C0) in closed form
        v = uu ** p
        d2v = p * (p - 1) * uu ** (p - 2) * u.d1(r) ** 2 + p * uu ** (p - 1) * u.d2(r)
        lap = (dv * dv + v * d2v + (Nn - 1) / r * v * dv) / C0
        lres = np.abs(lap - Nn) / Nn
        eres = np.abs(dv * dv / C0 - 1.0)
        return RigidityResidual(float(lres.max()), float(np.sqrt(np.mean(lres ** 2))), float(eres.max()),
                                float(np.sqrt(np.mean(eres ** 2))), C0, len(r), 1e-10 if tolerance is None else tolerance)
    Nn = u.space.N if N is None else N
    res = _graph_rigidity(u, Nn, region, bold_u, gradient)
    if tolerance is None:
        reg = region if region is not None else stencil_mask(u.space, stencil_mask(u.space, u.mask))
        tolerance = mesh_tolerance(u.space, reg & stencil_mask(u.space, stencil_mask(u.space, u.mask)))
    res.tolerance = tolerance
    return res


def cone_potential(u, N: float | None = None, normalization: float | None = None):
    """bold u = u^(2/(2-N)) / (2 C0), with C0 the fitted normalization from rigidity_residual."""
    if isinstance(u, RadialField):
        Nn = u.space.N if N is None else N
        if u.a != 0 or u.clamp is not None:
            raise PreconditionError("closed-form cone potential needs a pure power u = b r^(2-N)")
        q = 2.0 / (2 - Nn)
        coef = u.b ** q
        # v^2 = coef r^(p q) and p q = 2 for the exterior power, so |grad v|^2 = coef
        C0 = coef if normalization is None else normalization
        return RadialField(u.space, 0.0, coef / (2 * C0), u.p * q, label="cone potential")
    Nn = u.space.N if N is None else N
    if normalization is None:
        normalization = rigidity_residual(u, Nn).normalization
    v2 = np.where(u.mask, u.values, 1.0) ** (2.0 / (2 - Nn))
    return ScalarField(u.space, np.where(u.mask, v2 / (2 * normalization), np.nan), u.mask,
                       {"normalization": normalization})


# -- cosine law -------------------------------------------------------------------

def cosine_check(u, T: float, pairs, locality: float, tol: float | None = None) -> dict:
    """Worst relative residual of d(x,y)^2 = 2u(x) + 2u(y) - 4 sqrt(u(x)u(y)) (1 - d(Pr x, Pr y)^2 / (4T)).

    u is the cone potential bold u. On a radial field pairs are chart points;
    on a graph field they are vertex index pairs and u is read at the
    vertices. Ambient distances come from the space's metric; Pr flows to
    {u = T}. Pairs farther apart than the locality radius, or with an end
    where the interpolated gradient is undefined, are skipped. The residual
    is relative to d(x,y)^2.
    """
    from .flow import FieldInterpolant, project_points

    space = u.space
    interp = None
    if isinstance(u, RadialField):
        P = np.array([np.asarray(p, dtype=float) for p, _ in pairs])
        Q = np.array([np.asarray(q, dtype=float) for _, q in pairs])
        ux = u(np.linalg.norm(P, axis=1))
        uy = u(np.linalg.norm(Q, axis=1))
    else:
        idx = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
        if np.any(~u.mask[idx]):
            raise PreconditionError("pair vertices must lie in the solved region")
        P, Q = space.positions[idx[:, 0]], space.positions[idx[:, 1]]
        ux, uy = u.values[idx[:, 0]], u.values[idx[:, 1]]
    d = np.asarray(space.point_distance(P, Q), dtype=float)
    local = (d <= locality) & (d > 0)
    if not isinstance(u, RadialField):
        # vertices at the edge of the solved region have no interpolated gradient to flow along
        interp = FieldInterpolant(u)
        flowable = lambda X: np.all(np.isfinite(interp.metric_gradients(X)), axis=1)
        local &= flowable(P) & flowable(Q)
    if not local.any():
        return {"maxResidual": math.nan, "pairs": 0, "skipped": int(len(d))}
    P, Q, ux, uy, d = P[local], Q[local], ux[local], uy[local], d[local]
    both = project_points(space, u, T, np.concatenate([P, Q]), values=np.concatenate([ux, uy]), tol=tol,
                          interpolant=interp)
    dpr = np.asarray(space.point_distance(both[:len(P)], both[len(P):]), dtype=float)
    rhs = 2 * ux + 2 * uy - 4 * np.sqrt(ux * uy) * (1 - dpr * dpr / (4 * T))
    res = np.abs(d * d - rhs) / (d * d)
    return {"maxResidual": float(res.max()), "meanResidual": float(res.mean()), "pairs": int(local.sum()),
            "skipped": int((~local).sum())}


# -- cross-section -----------------------------------------------------------------

@dataclass
class CrossSectionSample:
    level: float
    pairs: np.ndarray
    intrinsic: np.ndarray
    ambient: np.ndarray
    band: np.ndarray
    connected: bool = True

    @property
    def rescaled(self) -> np.ndarray:
        return self.intrinsic / math.sqrt(2 * self.level)


def _band_graph(space: Space, idx: np.ndarray, reach: float):
    """Edges between band vertices closer than reach, weighted by metric distance.

    Shortest paths of the mesh graph itself are staircase paths on lattices;
    joining all nearby band vertices lets paths turn at any angle.
    """
    from scipy.sparse import coo_matrix
    from scipy.spatial import cKDTree

    if space.positions is None or space.metric.get("kind") not in ("euclidean", "cone", "cylinder"):
        return space.lengths_matrix[idx][:, idx]
    pts = space.positions[idx]
    # chart distances bound metric distances for these metrics up to the cone scale
    scale = min(1.0, space.metric.get("scale", 1.0))
    pairs = cKDTree(pts).query_pairs(reach / scale, output_type="ndarray")
    d = np.asarray(space.point_distance(pts[pairs[:, 0]], pts[pairs[:, 1]]), dtype=float)
    keep = d <= reach
    pairs, d = pairs[keep], d[keep]
    n = len(idx)
    return coo_matrix((d, (pairs[:, 0], pairs[:, 1])), shape=(n, n)).tocsr()


def cross_section(u: ScalarField, T: float, sample_count: int = 200, band_factor: float = 1.5,
                  seed: int = 0, reach_factor: float = 2.5) -> CrossSectionSample:
    """Level band {|bold u - T| <= band} with intrinsic shortest paths inside the band.

    The band half-width is band_factor times the largest change of u along an
    edge crossing the level. Paths run on the band vertices joined within
    reach_factor times the longest edge.
    """
    space = u.space
    vals = u.values
    a, b = space.edges[:, 0], space.edges[:, 1]
    both = u.mask[a] & u.mask[b]
    near = both & (np.minimum(vals[a], vals[b]) <= T) & (np.maximum(vals[a], vals[b]) >= T)
    if not near.any():
        raise PreconditionError(f"level {T} not attained")
    width = band_factor * float(np.max(np.abs(vals[a[near]] - vals[b[near]])))
    band = u.mask & (np.abs(vals - T) <= width)
    idx = np.flatnonzero(band)
    if len(idx) < 20:
        raise PreconditionError("level band has fewer than 20 vertices")
    sub = _band_graph(space, idx, reach_factor * float(space.length.max()))
    ncomp, labels = csgraph.connected_components(sub, directed=False)
    rng = np.random.default_rng(seed)
    src = rng.choice(len(idx), size=min(sample_count, len(idx)), replace=False)
    dst = rng.choice(len(idx), size=len(src), replace=True)
    rows = np.unique(src)
    D = csgraph.dijkstra(sub, directed=False, indices=rows)
    rowpos = {s: i for i, s in enumerate(rows)}
    intrinsic = np.array([D[rowpos[s], t] for s, t in zip(src, dst)])
    pairs = np.stack([idx[src], idx[dst]], axis=1)
    if space.positions is not None and space.metric.get("kind") != "graph":
        ambient = np.asarray(space.point_distance(space.positions[pairs[:, 0]], space.positions[pairs[:, 1]]))
    else:
        ambient = np.array([space.distances_from(p)[q] for p, q in pairs])
    keep = (pairs[:, 0] != pairs[:, 1]) & np.isfinite(intrinsic)
    if ncomp > 1:
        warnings.warn(f"level band splits into {ncomp} components")
    return CrossSectionSample(T, pairs[keep], intrinsic[keep], ambient[keep], idx, ncomp == 1)


def dd_prime_check(sample: CrossSectionSample, ceiling: float = 4.0) -> dict:
    ratio = sample.intrinsic / np.maximum(sample.ambient, 1e-300)
    c_fit = float(ratio.max())
    return {"cFit": c_fit, "minRatio": float(ratio.min()), "holds": bool(ratio.min() >= 1 - 1e-9 and c_fit <= ceiling),
            "connected": sample.connected}


def extension_radius(r: float, diameter: float) -> float:
    """r (1 - sin(D/2))^-1 for a cross-section of diameter D < pi."""
    if not 0 <= diameter < math.pi:
        raise PreconditionError("cross-section diameter must lie in [0, pi)")
    return r / (1 - math.sin(diameter / 2))


# -- Kato inequality -------------------------------------------------------------------

def kato_check(A, v, t: float) -> dict:
    """(t+n)/(t+n-1) |A v|^2 <= |v|^2 (tr A)^2 / t + |v|^2 |A|^2 (Hilbert-Schmidt)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if n == 0:
        raise PreconditionError("empty matrix")
    if t <= 0:
        raise PreconditionError("t must be positive")
    if not np.allclose(A, A.T):
        warnings.warn("matrix symmetrized")
        A = 0.5 * (A + A.T)
    v = np.asarray(v, dtype=float)
    Av = A @ v
    lhs = (t + n) / (t + n - 1) * float(Av @ Av)
    vv = float(v @ v)
    rhs = vv * float(np.trace(A)) ** 2 / t + vv * float(np.sum(A * A))
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs * (1 + 1e-12) + 1e-300}


def _kato_sides(A: np.ndarray, v: np.ndarray, t: float):
    n = A.shape[-1]
    Av = np.einsum("kij,kj->ki", A, v)
    lhs = (t + n) / (t + n - 1) * np.sum(Av * Av, axis=1)
    tr = np.trace(A, axis1=1, axis2=2)
    vv = np.sum(v * v, axis=1)
    rhs = vv * tr * tr / t + vv * np.sum(A * A, axis=(1, 2))
    return lhs, rhs


def kato_sharp_family(n: int, t: float, count: int, rng: np.random.Generator, noise: float = 1e-4):
    """Near-equality cases: eigenvalues -l/(t+n-1) (n-1 times) and l, v along the last eigenvector."""
    Q, _ = np.linalg.qr(rng.standard_normal((count, n, n)))
    lam_n = rng.uniform(0.5, 2.0, size=count)
    lam = np.concatenate([np.repeat((-lam_n / (t + n - 1))[:, None], n - 1, axis=1), lam_n[:, None]], axis=1)
    A = np.einsum("kij,kj,klj->kil", Q, lam, Q)
    A += noise * rng.standard_normal(A.shape)
    A = 0.5 * (A + np.swapaxes(A, 1, 2))
    v = Q[:, :, -1] + noise * rng.standard_normal((count, n))
    return A, v


def kato_search(ns=range(2, 7), trials: int = 100_000, t_grid=(0.1, 1.0, 10.0), seed: int = 0,
                sharp_fraction: float = 0.01) -> dict:
    """Random Gaussian symmetric matrices and unit vectors; reports min rhs/lhs and violations."""
    rng = np.random.default_rng(seed)
    ns = list(ns)
    combos = [(n, t) for n in ns for t in t_grid]
    base, extra = divmod(max(trials, len(combos)), len(combos))
    worst = math.inf
    violations = 0
    total = 0
    sharp_worst = math.inf
    for i, (n, t) in enumerate(combos):
        per = base + (i < extra)
        M = rng.standard_normal((per, n, n))
        A = 0.5 * (M + np.swapaxes(M, 1, 2))
        v = rng.standard_normal((per, n))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        lhs, rhs = _kato_sides(A, v, t)
        violations += int(np.sum(lhs > rhs * (1 + 1e-12)))
        worst = min(worst, float(np.min(rhs / lhs)))
        total += per
        k = max(1, int(per * sharp_fraction))
        As, vs = kato_sharp_family(n, t, k, rng)
        ls, rs = _kato_sides(As, vs, t)
        violations += int(np.sum(ls > rs * (1 + 1e-12)))
        sharp_worst = min(sharp_worst, float(np.min(rs / ls)))
    return {"worstRatio": min(worst, sharp_worst), "randomWorstRatio": worst, "sharpWorstRatio": sharp_worst,
            "violations": violations, "trials": total}
