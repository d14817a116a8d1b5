"""Metric measure spaces: weighted graphs and radial model cones.

A graph space stores vertex measures, undirected edges (each stored once) with
Laplacian weights and metric lengths, optional chart positions, and a metric
descriptor. Model families (lattices, cylinders, cone meshes) carry their exact
continuum metric so that ball masses and distances are not polluted by the
anisotropy of lattice shortest paths; abstract graphs fall back to shortest
paths over edge lengths.

A radial space is the model cone over a homogeneous cross-section, restricted
to ``r_min <= r <= r_max``; fields on it are analytic functions of ``r``.
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.spatial import ConvexHull

from .errors import BudgetExceeded, PreconditionError

VERTEX_BUDGET = 3_000_000


def cone_distance(t, s, dz):
    """Distance between (t, z) and (s, z') on a Euclidean cone with d_Z(z, z') = dz."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    dz = np.minimum(np.asarray(dz, dtype=float), math.pi)
    # half-angle form: no cancellation for nearby points
    out = np.hypot(t - s, 2.0 * np.sqrt(t * s) * np.sin(0.5 * dz))
    return float(out) if out.ndim == 0 else out


def cone_measure_density(t, N):
    return np.asarray(t, dtype=float) ** (N - 1)


@dataclass(frozen=True, eq=False)
class Space:
    backend: str
    N: float
    label: str = ""
    measure: np.ndarray | None = None
    edges: np.ndarray | None = None
    weight: np.ndarray | None = None
    length: np.ndarray | None = None
    positions: np.ndarray | None = None
    boundary: np.ndarray | None = None
    metric: dict = field(default_factory=lambda: {"kind": "graph"})
    grid: dict | None = None
    cross_section_mass: float | None = None
    r_min: float | None = None
    r_max: float | None = None
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def __post_init__(self):
        if self.backend == "radial":
            if not (self.cross_section_mass and self.cross_section_mass > 0):
                raise PreconditionError("radial space needs a positive cross-section mass")
            if not (0 < self.r_min < self.r_max):
                raise PreconditionError("radial space needs 0 < r_min < r_max")
            return
        if self.backend != "graph":
            raise PreconditionError(f"unknown backend {self.backend!r}")
        mu = np.ascontiguousarray(self.measure, dtype=float)
        edges = np.ascontiguousarray(self.edges, dtype=np.int64).reshape(-1, 2)
        w = np.ascontiguousarray(self.weight, dtype=float)
        ln = np.ascontiguousarray(self.length, dtype=float)
        n = len(mu)
        if n == 0:
            raise PreconditionError("graph space has no vertices")
        if np.any(mu <= 0) or np.any(w <= 0) or np.any(ln <= 0):
            raise PreconditionError("measures, weights and lengths must be positive")
        if len(edges) != len(w) or len(edges) != len(ln):
            raise PreconditionError("edge arrays have inconsistent lengths")
        if len(edges) and (edges.min() < 0 or edges.max() >= n or np.any(edges[:, 0] == edges[:, 1])):
            raise PreconditionError("edge endpoints out of range or self-loop")
        object.__setattr__(self, "measure", mu)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "length", ln)
        if self.positions is not None:
            object.__setattr__(self, "positions", np.asarray(self.positions, dtype=float).reshape(n, -1))
        if self.boundary is None:
            # leaves are the endpoints of an abstract graph
            object.__setattr__(self, "boundary", self.degree_count == 1)
        else:
            object.__setattr__(self, "boundary", np.asarray(self.boundary, dtype=bool))
        ncomp, _ = csgraph.connected_components(self.adjacency, directed=False)
        if ncomp != 1:
            raise PreconditionError(f"graph space is disconnected ({ncomp} components)")

    # -- cached structure -------------------------------------------------
    def _cached(self, key, build):
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

    @property
    def is_radial(self) -> bool:
        return self.backend == "radial"

    @property
    def n(self) -> int:
        return 0 if self.is_radial else len(self.measure)

    @property
    def adjacency(self) -> sp.csr_matrix:
        def build():
            a, b = self.edges[:, 0], self.edges[:, 1]
            W = sp.coo_matrix((np.r_[self.weight, self.weight], (np.r_[a, b], np.r_[b, a])),
                              shape=(self.n, self.n))
            return W.tocsr()
        return self._cached("W", build)

    @property
    def degree(self) -> np.ndarray:
        return self._cached("deg", lambda: np.asarray(self.adjacency.sum(axis=1)).ravel())

    @property
    def degree_count(self) -> np.ndarray:
        def build():
            c = np.bincount(self.edges[:, 0], minlength=self.n)
            return c + np.bincount(self.edges[:, 1], minlength=self.n)
        return self._cached("degc", build)

    @property
    def stiffness(self) -> sp.csr_matrix:
        """K = D - W, so that laplacian(f) = -(K f) / measure."""
        return self._cached("K", lambda: (sp.diags(self.degree) - self.adjacency).tocsr())

    @property
    def lengths_matrix(self) -> sp.csr_matrix:
        def build():
            a, b = self.edges[:, 0], self.edges[:, 1]
            L = sp.coo_matrix((np.r_[self.length, self.length], (np.r_[a, b], np.r_[b, a])),
                              shape=(self.n, self.n))
            return L.tocsr()
        return self._cached("Lmat", build)

    @property
    def total_measure(self) -> float:
        if self.is_radial:
            return self.cross_section_mass * (self.r_max ** self.N - self.r_min ** self.N) / self.N
        return float(self.measure.sum())

    # -- metric -----------------------------------------------------------
    def point_distance(self, p, q) -> np.ndarray:
        """Distance between chart points (rows of p and q, broadcast)."""
        kind = self.metric.get("kind", "graph")
        p = np.asarray(p, dtype=float)
        q = np.asarray(q, dtype=float)
        if kind == "euclidean":
            return np.linalg.norm(p - q, axis=-1)
        if kind == "cylinder":
            c = self.metric["circumference"]
            dx = p[..., 0] - q[..., 0]
            ds = np.abs(p[..., 1] - q[..., 1]) % c
            ds = np.minimum(ds, c - ds)
            return np.hypot(dx, ds)
        if kind == "cone":
            t = np.linalg.norm(p, axis=-1)
            s = np.linalg.norm(q, axis=-1)
            denom = np.where(t * s > 0, t * s, 1.0)
            cosang = np.clip(np.sum(p * q, axis=-1) / denom, -1.0, 1.0)
            return cone_distance(t, s, self.metric.get("scale", 1.0) * np.arccos(cosang))
        raise PreconditionError(f"metric {kind!r} has no closed form for chart points")

    def distances_from(self, i: int) -> np.ndarray:
        """Distances from vertex i to every vertex (inf when disconnected)."""
        i = int(i)
        if self.metric.get("kind", "graph") != "graph":
            return self.point_distance(self.positions, self.positions[i])

        def build():
            return csgraph.dijkstra(self.lengths_matrix, directed=False, indices=i)
        return self._cached(("dist", i), build)

    def distances_from_tip(self) -> np.ndarray:
        if self.metric.get("kind") != "cone":
            raise PreconditionError("tip distances need a cone metric")
        return np.linalg.norm(self.positions, axis=1)

    def safe_radius(self, center: int | None) -> float:
        """Largest radius around center whose ball avoids boundary vertices."""
        if self.is_radial:
            return self.r_max
        if center is None:
            t = self.distances_from_tip()
            outer = self.boundary & (t > t.min() * (1 + 1e-9))
            return float(t[outer].min()) if outer.any() else float(t.max())
        if not self.boundary.any():
            d = self.distances_from(center)
            return float(d[np.isfinite(d)].max())
        d = self.distances_from(center)
        return float(d[self.boundary].min())


@dataclass(frozen=True, eq=False)
class ScalarField:
    space: Space
    values: np.ndarray
    mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if self.mask is None:
            object.__setattr__(self, "mask", np.isfinite(vals))
        else:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    def __len__(self):
        return len(self.values)

    def with_values(self, values, mask=None, **meta):
        return ScalarField(self.space, values, self.mask if mask is None else mask, {**self.meta, **meta})

    def derived(self, key, build):
        """Memoize a quantity computed from this (immutable) field."""
        cache = self.__dict__.setdefault("_derived", {})
        if key not in cache:
            cache[key] = build()
        return cache[key]


@dataclass(frozen=True, eq=False)
class RadialField:
    """f(r) = a + b r^p on a radial space, with exact derivatives."""

    space: Space
    a: float
    b: float
    p: float
    label: str = ""
    clamp: tuple | None = None

    def __call__(self, r):
        v = self.a + self.b * np.power(r, self.p)
        return v if self.clamp is None else np.clip(v, *self.clamp)

    def d1(self, r):
        return self.b * self.p * np.power(r, self.p - 1)

    def d2(self, r):
        return self.b * self.p * (self.p - 1) * np.power(r, self.p - 2)

    def d3(self, r):
        return self.b * self.p * (self.p - 1) * (self.p - 2) * np.power(r, self.p - 3)

    def scaled(self, c: float) -> "RadialField":
        return RadialField(self.space, c * self.a, c * self.b, self.p, self.label,
                           None if self.clamp is None else (c * self.clamp[0], c * self.clamp[1]))

    def inverse(self, value: float) -> float:
        """Radius where the field equals value (monotone fields only)."""
        if self.b == 0 or self.p == 0:
            raise PreconditionError("constant radial field has no level radius")
        base = (value - self.a) / self.b
        if base <= 0:
            raise PreconditionError(f"level {value} not attained")
        return base ** (1.0 / self.p)


def as_values(f) -> np.ndarray:
    return f.values if isinstance(f, ScalarField) else np.asarray(f, dtype=float)


# -- difference operators ------------------------------------------------------

def _edge_accumulate(space: Space, c: np.ndarray) -> np.ndarray:
    a, b = space.edges[:, 0], space.edges[:, 1]
    return np.bincount(a, c, minlength=space.n) + np.bincount(b, c, minlength=space.n)


def stencil_mask(space: Space, mask: np.ndarray) -> np.ndarray:
    """Vertices in mask, off the space boundary, whose neighbours are all in mask."""
    mask = np.asarray(mask, dtype=bool)
    outside = space.adjacency.astype(bool).astype(np.int8) @ (~mask).astype(np.int8)
    return mask & ~space.boundary & (outside == 0)


def laplacian(space: Space, f) -> ScalarField:
    vals = as_values(f)
    mask = f.mask if isinstance(f, ScalarField) else np.isfinite(vals)
    filled = np.where(mask, vals, 0.0)
    lap = -(space.stiffness @ filled) / space.measure
    ok = stencil_mask(space, mask)
    return ScalarField(space, np.where(ok, lap, np.nan), ok)


def gradient_norm_values(space: Space, f: np.ndarray) -> np.ndarray:
    d = f[space.edges[:, 1]] - f[space.edges[:, 0]]
    return np.sqrt(_edge_accumulate(space, space.weight * d * d) / (2.0 * space.measure))


def gradient_inner_values(space: Space, f: np.ndarray, g: np.ndarray) -> np.ndarray:
    a, b = space.edges[:, 0], space.edges[:, 1]
    return _edge_accumulate(space, space.weight * (f[b] - f[a]) * (g[b] - g[a])) / (2.0 * space.measure)


def cone_mesh_layout(space: Space):
    """(shell radii, section size) of a built cone mesh, or None for other spaces.

    Built cone meshes store vertices shell by shell, each shell being the
    same cross-section sample scaled by its radius.
    """
    if space.is_radial or space.grid is not None or space.metric.get("kind") != "cone" or space.r_min is None:
        return None

    def build():
        t = np.linalg.norm(space.positions, axis=1)
        nz = int(np.sum(np.abs(t - t[0]) <= 1e-9 * t[0]))
        if nz == 0 or space.n % nz:
            return None
        shells = t.reshape(-1, nz)
        if np.ptp(shells, axis=1).max() > 1e-9 * shells.max():
            return None
        return shells[:, 0].copy(), nz
    return space._cached("cone-layout", build)


def _cone_gradient(space: Space, f: np.ndarray, shells: np.ndarray, nz: int) -> np.ndarray:
    # radial part: three-point difference on the shell grid (exact for quadratics in t)
    F = f.reshape(len(shells), nz)
    dF = np.empty_like(F)
    t = shells
    h0, h1 = t[1:-1] - t[:-2], t[2:] - t[1:-1]
    dF[1:-1] = (-(h1 / (h0 * (h0 + h1)))[:, None] * F[:-2] + ((h1 - h0) / (h0 * h1))[:, None] * F[1:-1]
                + (h0 / (h1 * (h0 + h1)))[:, None] * F[2:])
    dF[0] = (F[1] - F[0]) / (t[1] - t[0])
    dF[-1] = (F[-1] - F[-2]) / (t[-1] - t[-2])
    p = space.positions
    e = p / np.linalg.norm(p, axis=1)[:, None]
    a, b = space.edges[:, 0], space.edges[:, 1]
    same = (a // nz) == (b // nz)
    # tangential part: least squares over same-shell edges in the tangent plane
    d = p[b[same]] - p[a[same]]
    df = f[b[same]] - f[a[same]]
    w = space.weight[same]
    k = d.shape[1]
    M = np.zeros((space.n, k, k))
    r = np.zeros((space.n, k))
    for end in (a[same], b[same]):
        dt = d - np.sum(d * e[end], axis=1)[:, None] * e[end]
        for i in range(k):
            r[:, i] += np.bincount(end, w * dt[:, i] * df, minlength=space.n)
            for j in range(k):
                M[:, i, j] += np.bincount(end, w * dt[:, i] * dt[:, j], minlength=space.n)
    M += e[:, :, None] * e[:, None, :] * np.trace(M, axis1=1, axis2=2)[:, None, None]
    tang = np.linalg.solve(M, r[..., None])[..., 0]
    tang -= np.sum(tang * e, axis=1)[:, None] * e
    return tang + dF.reshape(-1)[:, None] * e


def gradient_vectors(space: Space, f: np.ndarray) -> np.ndarray:
    """Least-squares differential of f in chart coordinates, one row per vertex.

    Minimizes sum_y w_xy (f_y - f_x - G . (p_y - p_x))^2; on a lattice this is
    the central difference, whose error has no isotropic part. Built cone
    meshes split the differential into a shell-to-shell radial difference and a
    within-shell tangential fit, which is exact on radial functions.
    """
    if space.positions is None:
        raise PreconditionError("least-squares gradients need chart positions")
    layout = cone_mesh_layout(space)
    if layout is not None:
        return _cone_gradient(space, np.asarray(f, dtype=float), *layout)
    a, b = space.edges[:, 0], space.edges[:, 1]
    d = space.positions[b] - space.positions[a]
    df = f[b] - f[a]
    w = space.weight
    k = d.shape[1]
    M = np.empty((space.n, k, k))
    r = np.empty((space.n, k))
    for i in range(k):
        r[:, i] = _edge_accumulate(space, w * d[:, i] * df)
        for j in range(i, k):
            M[:, i, j] = M[:, j, i] = _edge_accumulate(space, w * d[:, i] * d[:, j])
    return np.linalg.solve(M, r[..., None])[..., 0]


def covector_norm(space: Space, G: np.ndarray) -> np.ndarray:
    """Metric norm of chart differentials (the cone scale shrinks angular directions)."""
    if space.metric.get("kind") == "cone":
        rho = space.metric.get("scale", 1.0)
        p = space.positions
        e = p / np.maximum(np.linalg.norm(p, axis=1), 1e-300)[:, None]
        radial = np.sum(G * e, axis=1)
        perp = G - radial[:, None] * e
        return np.sqrt(radial ** 2 + np.sum(perp * perp, axis=1) / rho ** 2)
    return np.linalg.norm(G, axis=1)


def gradient_norm_lsq(space: Space, f) -> ScalarField:
    vals = as_values(f)
    mask = f.mask if isinstance(f, ScalarField) else np.isfinite(vals)
    grad = covector_norm(space, gradient_vectors(space, np.where(mask, vals, 0.0)))
    ok = stencil_mask(space, mask)
    return ScalarField(space, np.where(ok, grad, np.nan), ok)


def gradient_norm(space: Space, f) -> ScalarField:
    vals = as_values(f)
    mask = f.mask if isinstance(f, ScalarField) else np.isfinite(vals)
    grad = gradient_norm_values(space, np.where(mask, vals, 0.0))
    ok = stencil_mask(space, mask)
    return ScalarField(space, np.where(ok, grad, np.nan), ok)


def dirichlet_energy(space: Space, f, region=None) -> float:
    """Sum over edges touching region of w (f(a) - f(b))^2.

    Summing over ordered neighbour pairs would count each edge twice, hence the
    customary factor one half; edges here are stored once.
    """
    vals = as_values(f)
    a, b = space.edges[:, 0], space.edges[:, 1]
    sel = slice(None)
    if region is not None:
        inside = np.zeros(space.n, dtype=bool)
        inside[np.asarray(region)] = True
        sel = inside[a] | inside[b]
    d = vals[b][sel] - vals[a][sel]
    return float(np.sum(space.weight[sel] * d * d))


def geodesic_distance(space: Space, a: int, b: int) -> float:
    return float(space.distances_from(a)[int(b)])


# -- balls and volume growth -----------------------------------------------

def ball_mass(space: Space, center: int | None, r: float) -> float:
    """Measure of the closed ball; center None means the cone tip."""
    if space.is_radial:
        rr = min(max(r, space.r_min), space.r_max)
        return space.cross_section_mass * (rr ** space.N - space.r_min ** space.N) / space.N
    d = space.distances_from_tip() if center is None else space.distances_from(center)
    return float(space.measure[d <= r * (1 + 1e-12) + 1e-15].sum())


def ball_masses(space: Space, center: int | None, radii) -> np.ndarray:
    radii = np.asarray(radii, dtype=float)
    if space.is_radial:
        return np.array([ball_mass(space, center, r) for r in radii])
    d = space.distances_from_tip() if center is None else space.distances_from(center)
    order = np.argsort(d)
    cum = np.cumsum(space.measure[order])
    k = np.searchsorted(d[order], radii * (1 + 1e-12) + 1e-15, side="right")
    return np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)


@dataclass
class VolumeProfile:
    radii: np.ndarray
    ratios: np.ndarray
    contaminated: np.ndarray

    def pairs(self):
        return list(zip(self.radii.tolist(), self.ratios.tolist()))


def bishop_gromov_profile(space: Space, center: int | None, r_grid) -> VolumeProfile:
    r = np.asarray(r_grid, dtype=float)
    if np.any(np.diff(r) <= 0) or np.any(r <= 0):
        raise PreconditionError("radius grid must be positive and increasing")
    masses = ball_masses(space, center, r)
    return VolumeProfile(r, masses / r ** space.N, r > space.safe_radius(center) * (1 + 1e-12))


def avr_estimate(space: Space, center: int | None) -> float:
    r = space.safe_radius(center)
    return ball_mass(space, center, r) / r ** space.N


# -- builders ----------------------------------------------------------------

def _check_budget(count: int, budget: int):
    if count > budget:
        raise BudgetExceeded(f"{count} vertices exceed the budget of {budget}")


def build_lattice(N: int, extent: float, h: float, budget: int = VERTEX_BUDGET) -> Space:
    """Cubic patch [-extent, extent]^N of h Z^N with nearest-neighbour edges."""
    if int(N) != N or N < 2:
        raise PreconditionError("lattice dimension must be an integer >= 2")
    N = int(N)
    if not (0 < h <= extent):
        raise PreconditionError("need 0 < h <= extent")
    side = int(round(2 * extent / h)) + 1
    _check_budget(side ** N, budget)
    idx = np.arange(side ** N).reshape((side,) * N)
    axes = [np.arange(side) * h - extent] * N
    positions = np.stack([g.ravel() for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    pairs = []
    for k in range(N):
        lo = [slice(None)] * N
        hi = [slice(None)] * N
        lo[k] = slice(0, side - 1)
        hi[k] = slice(1, side)
        pairs.append(np.stack([idx[tuple(lo)].ravel(), idx[tuple(hi)].ravel()], axis=1))
    edges = np.concatenate(pairs)
    m = len(edges)
    coords = np.stack([g.ravel() for g in np.meshgrid(*[np.arange(side)] * N, indexing="ij")], axis=1)
    boundary = np.any((coords == 0) | (coords == side - 1), axis=1)
    return Space("graph", N, label=f"lattice-N{N}-e{extent:g}-h{h:g}",
                 measure=np.full(side ** N, h ** N), edges=edges,
                 weight=np.full(m, h ** (N - 2)), length=np.full(m, h),
                 positions=positions, boundary=boundary, metric={"kind": "euclidean"},
                 grid={"origin": [-extent] * N, "h": h, "shape": [side] * N})


def build_cylinder(circumference: float, length: float, h: float, budget: int = VERTEX_BUDGET) -> Space:
    """Flat product of an interval of the given length with a circle."""
    if h <= 0 or h > length:
        raise PreconditionError("need 0 < h <= length")
    nc = max(3, int(round(circumference / h)))
    nx = int(round(length / h)) + 1
    _check_budget(nc * nx, budget)
    hx, hc = length / (nx - 1), circumference / nc
    ix, ic = np.meshgrid(np.arange(nx), np.arange(nc), indexing="ij")
    ix, ic = ix.ravel(), ic.ravel()
    vid = ix * nc + ic
    along = np.stack([vid[ix < nx - 1], vid[ix < nx - 1] + nc], axis=1)
    around = np.stack([vid, ix * nc + (ic + 1) % nc], axis=1)
    edges = np.concatenate([along, around])
    weight = np.r_[np.full(len(along), hc / hx), np.full(len(around), hx / hc)]
    length_arr = np.r_[np.full(len(along), hx), np.full(len(around), hc)]
    positions = np.stack([ix * hx - length / 2, ic * hc], axis=1)
    return Space("graph", 2, label=f"cylinder-c{circumference:g}-l{length:g}-h{h:g}",
                 measure=np.full(nx * nc, hx * hc), edges=edges, weight=weight, length=length_arr,
                 positions=positions, boundary=(ix == 0) | (ix == nx - 1),
                 metric={"kind": "cylinder", "circumference": circumference})


@dataclass
class _Section:
    kind: str
    mass: float
    scale: float
    areas: np.ndarray | None = None
    edges: np.ndarray | None = None
    weights: np.ndarray | None = None
    dz: np.ndarray | None = None
    points: np.ndarray | None = None


def _parse_section(cross_section: dict) -> _Section:
    if "circleAngle" in cross_section:
        a = float(cross_section["circleAngle"])
        if a <= 0:
            raise PreconditionError("circle angle must be positive")
        if a / 2 > math.pi * (1 + 1e-12):
            raise PreconditionError(f"cross-section diameter {a / 2:.6g} exceeds pi")
        return _Section("circle", a, a / (2 * math.pi))
    if "sphereRadiusFactor" in cross_section:
        rho = float(cross_section["sphereRadiusFactor"])
        if rho <= 0:
            raise PreconditionError("sphere radius factor must be positive")
        if rho > 1 + 1e-12:
            raise PreconditionError(f"cross-section diameter {rho * math.pi:.6g} exceeds pi")
        return _Section("sphere", 4 * math.pi * rho ** 2, rho)
    if "graph" in cross_section:
        z = cross_section["graph"]
        diam = float(csgraph.dijkstra(z.lengths_matrix, directed=False).max())
        if diam > math.pi * (1 + 1e-12):
            raise PreconditionError(f"cross-section diameter {diam:.6g} exceeds pi")
        return _Section("graph", z.total_measure, 1.0, z.measure, z.edges, z.weight, z.length)
    raise PreconditionError("cross-section must give circleAngle, sphereRadiusFactor or graph")


def fibonacci_sphere(n: int) -> np.ndarray:
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = math.pi * (1 + 5 ** 0.5) * k
    rxy = np.sqrt(1 - z * z)
    return np.stack([rxy * np.cos(phi), rxy * np.sin(phi), z], axis=1)


def _sample_section(sec: _Section, spacing: float, samples: int | None) -> _Section:
    """Discretize the cross-section with metric spacing close to `spacing`."""
    if sec.kind == "graph":
        return sec
    if sec.kind == "circle":
        n = samples or max(8, int(math.ceil(sec.mass / spacing)))
        theta = 2 * math.pi * np.arange(n) / n
        ds = sec.mass / n
        edges = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
        return _Section("circle", sec.mass, sec.scale, np.full(n, ds), edges, np.full(n, 1 / ds),
                        np.full(n, ds), np.stack([np.cos(theta), np.sin(theta)], axis=1))
    n = samples or max(20, int(math.ceil(sec.mass / spacing ** 2)))
    pts = fibonacci_sphere(n)
    tri = ConvexHull(pts).simplices
    areas = np.zeros(n)
    wsum: dict[tuple[int, int], float] = {}
    for t in tri:
        P = pts[t]
        area = 0.5 * np.linalg.norm(np.cross(P[1] - P[0], P[2] - P[0]))
        areas[t] += area / 3
        for k in range(3):
            i, j, o = t[k], t[(k + 1) % 3], t[(k + 2) % 3]
            u, v = pts[i] - pts[o], pts[j] - pts[o]
            cot = np.dot(u, v) / np.linalg.norm(np.cross(u, v))
            key = (min(i, j), max(i, j))
            wsum[key] = wsum.get(key, 0.0) + 0.5 * cot
    keys = np.array(sorted(wsum))
    weights = np.array([wsum[tuple(k)] for k in keys])
    if np.any(weights <= 0):
        # obtuse pairs on the hull are rare; clamp to keep an M-matrix
        weights = np.maximum(weights, 1e-3 * np.median(weights))
    ang = np.arccos(np.clip(np.sum(pts[keys[:, 0]] * pts[keys[:, 1]], axis=1), -1, 1))
    areas *= 4 * math.pi / areas.sum()
    return _Section("sphere", sec.mass, sec.scale, areas * sec.scale ** 2, keys, weights,
                    ang * sec.scale, pts)


def build_cone(N: float, cross_section: dict, r_min: float, r_max: float, radial_steps: int,
               backend: str = "graph", section_samples: int | None = None,
               budget: int = VERTEX_BUDGET) -> Space:
    """Cone t^{N-1} dt (x) m_Z over a cross-section, as a shell mesh or a radial model."""
    if N < 2:
        raise PreconditionError("cone dimension parameter must be >= 2")
    if r_min <= 0 or r_min >= r_max:
        raise PreconditionError("need 0 < r_min < r_max")
    sec = _parse_section(cross_section)
    metric = {"kind": "cone", "scale": sec.scale, "section": sec.kind}
    label = f"cone-{sec.kind}-N{N:g}"
    if backend == "radial":
        if sec.kind == "graph":
            metric = {"kind": "graph"}
        return Space("radial", N, label=label, cross_section_mass=sec.mass,
                     r_min=r_min, r_max=r_max, metric=metric)
    if radial_steps < 2:
        raise PreconditionError("need at least two radial shells")
    q = (r_max / r_min) ** (1.0 / (radial_steps - 1))
    sec = _sample_section(sec, q - 1, section_samples)
    nz = len(sec.areas)
    _check_budget(nz * radial_steps, budget)
    t = r_min * q ** np.arange(radial_steps)
    faces = np.sqrt(t[:-1] * t[1:])
    lo = np.r_[r_min, faces]
    hi = np.r_[faces, r_max]
    shell = (hi ** N - lo ** N) / N
    if abs(N - 2) < 1e-12:
        jac = np.log(hi / lo)
    else:
        jac = (hi ** (N - 2) - lo ** (N - 2)) / (N - 2)
    vid = np.arange(radial_steps * nz).reshape(radial_steps, nz)
    measure = (shell[:, None] * sec.areas[None, :]).ravel()
    radial_edges = np.stack([vid[:-1].ravel(), vid[1:].ravel()], axis=1)
    radial_w = (sec.areas[None, :] * faces[:, None] ** (N - 1) / (t[1:] - t[:-1])[:, None]).ravel()
    radial_len = np.repeat(t[1:] - t[:-1], nz)
    ang_edges = np.concatenate([vid[i][sec.edges] for i in range(radial_steps)])
    ang_w = (jac[:, None] * sec.weights[None, :]).ravel()
    ang_len = cone_distance(np.repeat(t, len(sec.edges)), np.repeat(t, len(sec.edges)),
                            np.tile(sec.dz, radial_steps))
    positions = None
    if sec.points is not None:
        positions = (t[:, None, None] * sec.points[None, :, :]).reshape(-1, sec.points.shape[1])
    else:
        metric = {"kind": "graph"}
    boundary = np.zeros((radial_steps, nz), dtype=bool)
    boundary[[0, -1]] = True
    return Space("graph", N, label=label, measure=measure,
                 edges=np.concatenate([radial_edges, ang_edges]),
                 weight=np.r_[radial_w, ang_w], length=np.r_[radial_len, ang_len],
                 positions=positions, boundary=boundary.ravel(), metric=metric,
                 cross_section_mass=sec.mass, r_min=r_min, r_max=r_max)


def build_radial(N: float, r_min: float, r_max: float, cross_section_mass: float | None = None) -> Space:
    """Radial model of R^N (or of a cone with the given cross-section mass)."""
    if cross_section_mass is None:
        cross_section_mass = 2 * math.pi ** (N / 2) / math.gamma(N / 2)
    return Space("radial", N, label=f"radial-N{N:g}", cross_section_mass=cross_section_mass,
                 r_min=r_min, r_max=r_max, metric={"kind": "cone", "scale": 1.0, "section": "sphere"})


def bump_density(space: Space, amplitude: float, centers, sigma: float, weights_too: bool = True,
                 label: str | None = None) -> Space:
    """Multiply measures (and edge weights) by 1 + amplitude * sum of Gaussian bumps."""
    if space.positions is None:
        raise PreconditionError("density bumps need vertex positions")
    centers = np.atleast_2d(np.asarray(centers, dtype=float))

    def density(p):
        d2 = ((p[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        return 1 + amplitude * np.exp(-d2 / (2 * sigma ** 2)).sum(axis=1)

    rho = density(space.positions)
    weight = space.weight
    if weights_too:
        mid = 0.5 * (space.positions[space.edges[:, 0]] + space.positions[space.edges[:, 1]])
        weight = weight * density(mid)
    return Space("graph", space.N, label=label or f"{space.label}-bump{amplitude:g}",
                 measure=space.measure * rho, edges=space.edges, weight=weight, length=space.length,
                 positions=space.positions, boundary=space.boundary, metric=dict(space.metric),
                 grid=space.grid)


def vertices_in_ball(space: Space, center, radius: float, strict: bool = False) -> np.ndarray:
    """Indices of vertices within radius of a vertex id or of a chart point."""
    if isinstance(center, (int, np.integer)):
        d = space.distances_from(int(center))
    else:
        d = space.point_distance(space.positions, np.asarray(center, dtype=float))
    sel = d < radius if strict else d <= radius * (1 + 1e-12)
    return np.flatnonzero(sel)


def matched_ball(space: Space, center, radius: float, layer_side: str = "inner") -> np.ndarray:
    """Vertex ball whose outer layer sits at mean distance radius from the center.

    A Dirichlet condition on a vertex set acts at its outermost vertices, which
    for a plain cutoff lie up to one edge inside the sphere. Choosing the cutoff
    by the layer's mean distance removes that first-order shrinkage.
    layer_side="outer" matches the first ring outside the ball instead, which is
    where a Dirichlet condition on the complement acts.
    """
    if isinstance(center, (int, np.integer)):
        d = space.distances_from(int(center))
    else:
        d = space.point_distance(space.positions, np.asarray(center, dtype=float))
    hmax = float(space.length.max())
    cand = np.unique(d[(d >= radius - 2 * hmax) & (d <= radius + 2 * hmax)])
    if len(cand) == 0:
        return vertices_in_ball(space, center, radius)
    A = space.adjacency.astype(bool)
    best, best_gap = None, math.inf
    for rho in cand:
        inside = d <= rho * (1 + 1e-12)
        if layer_side == "outer":
            layer = ~inside & (A @ inside.astype(np.int8) > 0)
        else:
            layer = inside & (A @ (~inside).astype(np.int8) > 0)
        if not layer.any():
            continue
        gap = abs(float(d[layer].mean()) - radius)
        if gap < best_gap:
            best, best_gap = inside, gap
    return np.flatnonzero(best) if best is not None else vertices_in_ball(space, center, radius)


def nearest_vertex(space: Space, point) -> int:
    return int(np.argmin(space.point_distance(space.positions, np.asarray(point, dtype=float))))

