"""Exterior Dirichlet problem, obstacle problem and capacity diagnostics."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse import csgraph
from scipy.sparse.linalg import eigsh, splu

from .errors import PreconditionError, SolverError
from .mmspace import (RadialField, ScalarField, Space, as_values, dirichlet_energy,
                      matched_ball, nearest_vertex, vertices_in_ball)

log = logging.getLogger(__name__)

LINEAR_TOL = 1e-10
COMPLEMENTARITY_TOL = 1e-8
DIRECT_LIMIT = 20_000


class LinearSolver:
    """Reusable SPD solve: sparse LU for small systems, AMG-preconditioned CG above."""

    def __init__(self, A: sp.spmatrix, tol: float = LINEAR_TOL, method: str = "auto"):
        self.A = A.tocsr()
        self.tol = tol
        n = A.shape[0]
        if method == "auto":
            method = "direct" if n <= DIRECT_LIMIT else "amg"
        self.method = method
        if method == "direct":
            self._lu = splu(self.A.tocsc())
        elif method == "amg":
            import pyamg
            self._ml = pyamg.smoothed_aggregation_solver(self.A, symmetry="symmetric")
        else:
            raise PreconditionError(f"unknown linear solver {method!r}")

    def solve(self, b: np.ndarray) -> np.ndarray:
        if not np.any(b):
            return np.zeros_like(b)
        if self.method == "direct":
            return self._lu.solve(b)
        x = self._ml.solve(b, tol=self.tol * 0.1, accel="cg", maxiter=400)
        rel = np.linalg.norm(b - self.A @ x) / np.linalg.norm(b)
        if rel > self.tol:
            raise SolverError(f"AMG-CG stalled at relative residual {rel:.3e}")
        return x


def _as_index(space: Space, vertices) -> np.ndarray:
    idx = np.unique(np.asarray(vertices, dtype=np.int64).ravel())
    if len(idx) and (idx[0] < 0 or idx[-1] >= space.n):
        raise PreconditionError("vertex id out of range")
    return idx


def _indicator(space: Space, idx) -> np.ndarray:
    out = np.zeros(space.n, dtype=bool)
    out[idx] = True
    return out


# -- exterior problem ----------------------------------------------------------

@dataclass
class ExteriorProblemSpec:
    space: Space
    obstacle_complement: np.ndarray | None = None
    r_out: float = math.inf
    center: int | None = None


def _monopole_reference(space: Space, omega_c: np.ndarray, center: int) -> np.ndarray:
    """Distance used by the far-field profile d^{2-N}."""
    kind = space.metric.get("kind")
    if kind == "cone":
        return np.linalg.norm(space.positions, axis=1)
    if kind == "euclidean":
        c = space.positions[omega_c].mean(axis=0)
        return np.linalg.norm(space.positions - c, axis=1)
    return space.distances_from(center)


def solve_exterior(spec: ExteriorProblemSpec, tol: float = LINEAR_TOL, far_field: str = "zero",
                   solver: str = "auto", tight_threshold: float = 0.25):
    """Harmonic u with u = 1 on the obstacle complement and decay imposed at r_out.

    far_field="zero" sets u = 0 on the truncation shell. far_field="monopole"
    sets u = k d^{2-N} there, with k chosen so that the layer next to the shell
    matches the same profile; this approximates the decaying solution on the
    unbounded space instead of the truncated one.
    """
    space = spec.space
    if far_field not in ("zero", "monopole"):
        raise PreconditionError(f"unknown far-field condition {far_field!r}")
    if space.is_radial:
        return _radial_exterior(spec, far_field)
    omega_c = _as_index(space, spec.obstacle_complement)
    if len(omega_c) == 0:
        raise PreconditionError("obstacle complement is empty")
    if len(omega_c) == space.n:
        raise PreconditionError("obstacle complement is the whole space (empty exterior)")
    in_c = _indicator(space, omega_c)
    center = spec.center
    if center is None:
        center = (nearest_vertex(space, space.positions[omega_c].mean(axis=0))
                  if space.positions is not None else int(omega_c[0]))
    dist = space.distances_from(center)
    margin = float(space.length.max())
    if not math.isfinite(spec.r_out) and not space.boundary.any():
        raise PreconditionError("no truncation shell: give r_out or a space with boundary vertices")
    if dist[omega_c].max() + margin >= spec.r_out:
        raise PreconditionError("truncation radius does not clear the obstacle complement")
    if math.isfinite(spec.r_out):
        inside = _indicator(space, matched_ball(space, center, spec.r_out, layer_side="outer"))
    else:
        inside = np.ones(space.n, dtype=bool)
    shell = (~inside | space.boundary) & ~in_c
    if not shell.any():
        raise PreconditionError("truncation shell is empty")
    free = ~(in_c | shell)
    if not free.any():
        raise PreconditionError("no free vertices between obstacle and shell")
    F = np.flatnonzero(free)
    K = space.stiffness
    KF = K[F]
    lin = LinearSolver(KF[:, F], tol, solver)
    u = np.zeros(space.n)
    u[in_c] = 1.0
    u0 = lin.solve(-(KF[:, omega_c] @ np.ones(len(omega_c))))
    layer = free & (space.adjacency.astype(bool) @ shell.astype(np.int8) > 0)
    meta = {"far_field": far_field, "center": int(center), "r_out": spec.r_out}
    if far_field == "monopole":
        if space.N <= 2:
            raise PreconditionError("monopole far field needs N > 2")
        ref = _monopole_reference(space, omega_c, center)
        g = np.where(ref > 0, ref, np.inf) ** (2 - space.N)
        S = np.flatnonzero(shell)
        u1 = lin.solve(-(KF[:, S] @ g[S]))
        lay = layer[F]
        mu = space.measure[F][lay]
        diff = g[F][lay] - u1[lay]
        k = float(np.sum(mu * u0[lay] * diff) / np.sum(mu * diff * diff))
        u[F] = u0 + k * u1
        u[S] = k * g[S]
        meta["monopole_coefficient"] = k
    else:
        u[F] = u0
    residual = float(np.max(np.abs(K[F] @ u) / space.measure[F]))
    meta["residual"] = residual
    layer_max = float(u[layer].max()) if layer.any() else 0.0
    meta["shell_layer_max"] = layer_max
    if far_field == "zero" and layer_max > tight_threshold:
        meta["truncation_tight"] = True
        warnings.warn(f"truncation tight: u reaches {layer_max:.3g} next to the shell")
    # the solved region is the closure of the exterior: free vertices plus the rim of the obstacle
    rim = in_c & (space.adjacency.astype(bool) @ free.astype(np.int8) > 0)
    return ScalarField(space, u, free | rim, meta)


def _radial_exterior(spec: ExteriorProblemSpec, far_field: str) -> RadialField:
    s = spec.space
    N = s.N
    if N <= 2:
        raise PreconditionError("radial exterior solution needs N > 2")
    a = s.r_min
    if far_field == "monopole" or not math.isfinite(spec.r_out):
        return RadialField(s, 0.0, a ** (N - 2), 2 - N, "exterior")
    R = spec.r_out
    if R <= a:
        raise PreconditionError("truncation radius must exceed r_min")
    denom = a ** (2 - N) - R ** (2 - N)
    return RadialField(s, -R ** (2 - N) / denom, 1.0 / denom, 2 - N, "exterior-truncated")


def exterior_richardson(space: Space, omega_c, radii=(4.0, 6.0, 8.0), tol: float = LINEAR_TOL,
                        center: int | None = None) -> ScalarField:
    """Extrapolate zero-shell solutions to r_out = infinity, assuming u_R = u + a/R + b/R^2."""
    radii = np.asarray(sorted(radii), dtype=float)
    if len(radii) < 2:
        raise PreconditionError("need at least two truncation radii")
    sols = [solve_exterior(ExteriorProblemSpec(space, omega_c, R, center), tol) for R in radii]
    center = sols[0].meta["center"]
    inside = space.distances_from(center) < radii[0]
    basis = np.stack([np.ones_like(radii), 1 / radii, 1 / radii ** 2][:len(radii)], axis=1)
    U = np.stack([s.values for s in sols])
    coef, *_ = np.linalg.lstsq(basis, U[:, inside], rcond=None)
    vals = np.full(space.n, np.nan)
    vals[inside] = coef[0]
    return ScalarField(space, vals, inside, {"richardson_radii": radii.tolist()})


# -- obstacle problem --------------------------------------------------------------

@dataclass
class CapacityResult:
    potential: ScalarField | RadialField
    capacity: float
    iterations: int
    residual: float
    active_set: np.ndarray
    E: object = None
    B: object = None
    tol: float = COMPLEMENTARITY_TOL
    free: np.ndarray | None = field(default=None, repr=False)


def _two_coloring(W: sp.csr_matrix) -> list[np.ndarray] | None:
    n = W.shape[0]
    ncomp, labels = csgraph.connected_components(W, directed=False)
    roots = np.unique(labels, return_index=True)[1]
    depth = csgraph.dijkstra(W, directed=False, indices=roots, unweighted=True, min_only=True)
    parity = depth.astype(np.int64) % 2
    coo = W.tocoo()
    if np.any(parity[coo.row] == parity[coo.col]):
        return None
    return [np.flatnonzero(parity == 0), np.flatnonzero(parity == 1)]


def _greedy_coloring(W: sp.csr_matrix, seed: int = 0) -> list[np.ndarray]:
    """Jones-Plassmann independent sets by random priority."""
    n = W.shape[0]
    rng = np.random.default_rng(seed)
    prio = rng.permutation(n).astype(float) + 1
    S = W.astype(bool).tocsr()
    uncolored = np.ones(n, dtype=bool)
    colors = []
    while uncolored.any():
        p = np.where(uncolored, prio, 0.0)
        nbmax = np.asarray(S.multiply(p[None, :]).max(axis=1).todense()).ravel()
        pick = uncolored & (p > nbmax)
        colors.append(np.flatnonzero(pick))
        uncolored &= ~pick
    return colors


def coloring(W: sp.csr_matrix) -> list[np.ndarray]:
    return _two_coloring(W) or _greedy_coloring(W)


def sor_parameter(W: sp.csr_matrix, d: np.ndarray) -> float:
    """Young's optimal relaxation from the Jacobi spectral radius."""
    n = W.shape[0]
    Dm = sp.diags(1 / np.sqrt(d))
    J = (Dm @ W @ Dm).tocsr()
    if n < 50:
        rho = float(np.max(np.abs(np.linalg.eigvalsh(J.toarray())))) if n else 0.0
    else:
        rho = float(eigsh(J, k=1, which="LA", return_eigenvectors=False, tol=1e-4)[0])
    rho = min(max(rho, 0.0), 1 - 1e-12)
    return min(2.0 / (1.0 + math.sqrt(1 - rho * rho)), 1.98)


def _obstacle_sets(space: Space, E, B):
    e_idx = _as_index(space, E)
    b_idx = _as_index(space, B)
    inB = _indicator(space, b_idx)
    inE = _indicator(space, e_idx)
    if np.any(inE & ~inB):
        raise PreconditionError("E is not contained in B")
    touches_out = space.adjacency.astype(bool) @ (~inB).astype(np.int8) > 0
    free = inB & ~(space.boundary | touches_out)
    if np.any(inE & ~free):
        raise PreconditionError("E is not compactly contained in B (meets its boundary ring)")
    sub = space.adjacency[b_idx][:, b_idx]
    if len(b_idx) and csgraph.connected_components(sub, directed=False)[0] != 1:
        raise PreconditionError("B is not connected")
    return inE, inB, free


def solve_obstacle(space: Space, E, B, tol: float = COMPLEMENTARITY_TOL, omega: float | None = None,
                   max_iter: int = 50_000, init: np.ndarray | None = None,
                   check_every: int = 10) -> CapacityResult:
    """Minimize the Dirichlet energy over u = 0 off int(B), u >= 1 on E.

    Projected SOR with a multicolour ordering (red-black on bipartite graphs),
    stopped when the complementarity residual max|min(u - psi, (K u)/deg)| <= tol.
    Iterates are clamped to [0, 1].
    """
    if space.is_radial:
        return _radial_obstacle(space, E, B)
    inE, inB, free = _obstacle_sets(space, E, B)
    F = np.flatnonzero(free)
    u_full = np.zeros(space.n)
    if len(F) == 0:
        return CapacityResult(ScalarField(space, u_full), 0.0, 0, 0.0, F, E, B, tol, free)
    W = space.adjacency[F][:, F].tocsr()
    d = space.degree[F]
    psi = inE[F].astype(float)
    u = psi.copy() if init is None else np.clip(np.asarray(init, dtype=float)[F], 0, 1)
    u = np.maximum(u, psi)
    colors = coloring(W)
    rows = [(c, W[c]) for c in colors]
    if omega is None:
        omega = sor_parameter(W, d)
    residual = math.inf
    it = 0
    while it < max_iter:
        for c, Wc in rows:
            gs = (Wc @ u) / d[c]
            u[c] = np.clip(np.maximum(psi[c], (1 - omega) * u[c] + omega * gs), 0.0, 1.0)
        it += 1
        if it % check_every == 0 or it == max_iter:
            residual = float(np.max(np.abs(np.minimum(u - psi, u - (W @ u) / d))))
            if residual <= tol:
                break
    if residual > tol:
        raise SolverError(f"projected SOR reached {max_iter} iterations at residual {residual:.3e}")
    u_full[F] = u
    active = F[(u >= psi) & (u >= 1.0)]
    cap = dirichlet_energy(space, u_full)
    field_ = ScalarField(space, u_full, np.ones(space.n, dtype=bool), {"omega": omega, "colors": len(colors)})
    return CapacityResult(field_, cap, it, residual, active, E, B, tol, free)


def solve_obstacle_active_set(space: Space, E, B, psi: np.ndarray | None = None, c: float = 1.0,
                              max_iter: int = 200) -> CapacityResult:
    """Primal-dual active-set method with sparse direct solves (small instances)."""
    inE, inB, free = _obstacle_sets(space, E, B)
    F = np.flatnonzero(free)
    n = len(F)
    K = space.stiffness[F][:, F].tocsr()
    ob = inE[F].astype(float) if psi is None else np.asarray(psi, dtype=float)[F]
    u = np.zeros(n)
    lam = np.zeros(n)
    active = ob > 0
    # interior vertices of E solve to 1 up to round-off with zero multiplier; ignore that noise
    noise = 1e-10 * max(1.0, float(np.abs(K.diagonal()).max()))
    for it in range(1, max_iter + 1):
        inactive = ~active
        u = ob.copy()
        I = np.flatnonzero(inactive)
        if len(I):
            A_idx = np.flatnonzero(active)
            rhs = -(K[I][:, A_idx] @ ob[A_idx])
            u[I] = splu(K[I][:, I].tocsc()).solve(rhs) if len(I) else u[I]
        lam = K @ u
        lam[inactive] = 0.0
        new_active = lam + c * (ob - u) > noise
        if np.array_equal(new_active, active):
            break
        active = new_active
    else:
        raise SolverError("active-set iteration did not settle")
    u_full = np.zeros(space.n)
    u_full[F] = u
    res = float(np.max(np.abs(np.minimum(u - ob, (K @ u) / space.degree[F])))) if n else 0.0
    return CapacityResult(ScalarField(space, u_full, np.ones(space.n, dtype=bool)),
                          dirichlet_energy(space, u_full), it, res, F[active], E, B, 0.0, free)


def _radial_obstacle(space: Space, E, B) -> CapacityResult:
    """E = {r <= a}, B = {r < R} around the tip, given as radii."""
    a, R = float(E), float(B)
    N = space.N
    if N <= 2:
        raise PreconditionError("radial capacity needs N > 2")
    if not (space.r_min <= a < R <= space.r_max):
        raise PreconditionError("need r_min <= a < R <= r_max")
    denom = a ** (2 - N) - R ** (2 - N)
    pot = RadialField(space, -R ** (2 - N) / denom, 1.0 / denom, 2 - N, "capacitary", clamp=(0.0, 1.0))
    cap = space.cross_section_mass * (N - 2) / denom
    return CapacityResult(pot, cap, 0, 0.0, np.array([a]), a, R, 0.0)


# -- comparison, lift and boundary-regularity diagnostics -------------------------------

def comparison_check(result: CapacityResult, v, tol: float | None = None) -> dict:
    """Report max(u - v) over B for a superharmonic competitor v >= chi_E, v >= 0."""
    tol = result.tol if tol is None else tol
    u = result.potential
    if isinstance(u, RadialField):
        raise PreconditionError("comparison check is implemented for graph spaces")
    space = u.space
    vv = as_values(v)
    inB = _indicator(space, _as_index(space, result.B))
    inE = _indicator(space, _as_index(space, result.E))
    free = result.free
    lap = -(space.stiffness @ vv) / space.measure
    # the same slack the complementarity residual allows: u - Wu/deg >= -tol
    bad = np.flatnonzero(free & (lap > tol * space.degree / space.measure))
    if len(bad):
        raise PreconditionError(f"v is not superharmonic at {len(bad)} vertices, e.g. {bad[:5].tolist()}")
    if np.any(vv[inE] < 1 - 1e-12):
        raise PreconditionError("v < 1 somewhere on E")
    if np.any(vv[inB] < -1e-12):
        raise PreconditionError("v is negative somewhere in B")
    worst = float(np.max(u.values[inB] - vv[inB]))
    return {"holds": worst <= tol, "worstViolation": max(worst, 0.0)}


def solve_superlevel_obstacle(space: Space, phi, level: float, B, tol: float = LINEAR_TOL) -> CapacityResult:
    """Capacitary potential of {phi >= level} in B, with the set boundary on edges.

    phi is interpolated linearly along each edge; an edge from x (phi < level)
    to y (phi >= level) ends in a Dirichlet node at the crossing fraction
    theta, which turns its weight w into w / theta. Vertices at or above the
    level are fixed to 1.
    """
    phi = as_values(phi)
    inB = _indicator(space, _as_index(space, B))
    touches_out = space.adjacency.astype(bool) @ (~inB).astype(np.int8) > 0
    free_B = inB & ~(space.boundary | touches_out)
    upper = phi >= level
    if np.any(upper & ~free_B):
        raise PreconditionError("superlevel set is not compactly contained in B")
    if not upper.any():
        raise PreconditionError(f"level {level} is not reached")
    free = free_B & ~upper
    a, b = space.edges[:, 0], space.edges[:, 1]
    w = space.weight.copy()
    # orient every cut edge as (below, above)
    cut = upper[a] != upper[b]
    lo = np.where(upper[a], b, a)[cut]
    hi = np.where(upper[a], a, b)[cut]
    theta = (level - phi[lo]) / (phi[hi] - phi[lo])
    diag_extra = np.bincount(lo, weights=w[cut] / theta, minlength=space.n)
    keep = ~cut & ~upper[a] & ~upper[b]
    n = space.n
    W = sp.coo_matrix((np.r_[w[keep], w[keep]], (np.r_[a[keep], b[keep]], np.r_[b[keep], a[keep]])),
                      shape=(n, n)).tocsr()
    deg = np.asarray(W.sum(axis=1)).ravel() + diag_extra
    K = (sp.diags(deg) - W).tocsr()
    F = np.flatnonzero(free)
    u = np.zeros(n)
    u[upper] = 1.0
    if len(F):
        u[F] = LinearSolver(K[F][:, F], tol).solve(diag_extra[F])
    # energy: full edges plus the cut edges up to their crossings
    ek = w[keep] * (u[a[keep]] - u[b[keep]]) ** 2
    ec = w[cut] / theta * (1.0 - u[lo]) ** 2
    cap = float(ek.sum() + ec.sum())
    res = float(np.max(np.abs(K[F] @ u - diag_extra[F]) / deg[F])) if len(F) else 0.0
    return CapacityResult(ScalarField(space, u, np.ones(n, dtype=bool), {"level": level}),
                          cap, 1, res, np.flatnonzero(upper), np.flatnonzero(upper), B, tol, free)


def lift_check(result: CapacityResult, m: float, tol: float | None = None, mode: str = "cut-edge") -> dict:
    """Compare min(u/m, 1) with an independent solve for E' = {u > m}.

    mode="cut-edge" places the boundary of E' at the linear crossings of the
    level on edges; mode="vertex" takes E' as the vertex set {u > m}, whose
    boundary sits up to one edge off the level and so differs at order h.
    """
    if not (0 < m <= 1):
        raise PreconditionError("m must lie in (0, 1]")
    if mode not in ("cut-edge", "vertex"):
        raise PreconditionError(f"unknown lift mode {mode!r}")
    tol = result.tol if tol is None else tol
    u = result.potential
    if isinstance(u, RadialField):
        space = u.space
        a2 = u.inverse(m) if m < 1 else float(result.E)
        other = _radial_obstacle(space, a2, result.B)
        r = np.linspace(space.r_min, result.B, 2001)
        lifted = np.minimum(u(r) / m, 1.0)
        diff = float(np.max(np.abs(lifted - other.potential(r))))
        return {"agrees": diff <= tol, "maxDiff": diff, "capacity": other.capacity}
    space = u.space
    lifted = np.minimum(u.values / m, 1.0)
    if m == 1:
        other = solve_obstacle(space, np.flatnonzero(u.values >= 1.0), result.B, tol=result.tol, init=u.values)
    elif mode == "cut-edge":
        other = solve_superlevel_obstacle(space, u.values, m, result.B)
    else:
        other = solve_obstacle(space, np.flatnonzero(u.values > m), result.B, tol=min(tol, result.tol) * 0.1)
    diff = float(np.max(np.abs(lifted - other.potential.values)))
    return {"agrees": diff <= tol, "maxDiff": diff, "capacity": other.capacity}


def cap_fat_ratio(space: Space, E, x: int, s_grid, tol: float = COMPLEMENTARITY_TOL) -> list:
    """Relative capacity Cap(B_s(x) & E, B_2s(x)) / Cap(B_s(x), B_2s(x)) per radius."""
    h = float(np.min(space.length))
    inE = _indicator(space, _as_index(space, E))
    d = space.distances_from(x)
    safe = space.safe_radius(x)
    out = []
    for s in s_grid:
        if s < 3 * h:
            warnings.warn(f"radius {s} below three mesh widths skipped")
            continue
        if 2 * s >= safe:
            warnings.warn(f"radius {s}: ball of radius {2 * s} reaches the space boundary, skipped")
            continue
        ball = np.flatnonzero(d <= s * (1 + 1e-12))
        big = np.flatnonzero(d < 2 * s)
        num = solve_obstacle(space, ball[inE[ball]], big, tol).capacity
        den = solve_obstacle(space, ball, big, tol).capacity
        out.append((float(s), num / den))
    return out


def corkscrew_check(space: Space, E, x: int, lam: float, r_grid, max_candidates: int = 64) -> list[bool]:
    """For each s, is there a ball of radius lam*s inside B_s(x) & E."""
    if not (0 < lam < 1):
        raise PreconditionError("lambda must lie in (0, 1)")
    h = float(np.min(space.length))
    if lam * min(r_grid) < 2 * h * (1 - 1e-12):
        raise PreconditionError("lambda * min radius is below two mesh widths")
    inE = _indicator(space, _as_index(space, E))
    dx = space.distances_from(x)
    depth = _depth_in_set(space, inE)
    out = []
    for s in r_grid:
        region = inE & (dx <= s * (1 + 1e-12))
        cand = np.flatnonzero(region & (dx + lam * s <= s * (1 + 1e-12)) & (depth > lam * s * (1 - 1e-9)))
        cand = cand[np.argsort(-depth[cand])][:max_candidates]
        ok = False
        for y in cand:
            ball = space.distances_from(int(y)) <= lam * s * (1 + 1e-12)
            if np.all(region[ball]):
                ok = True
                break
        out.append(ok)
    return out


def _depth_in_set(space: Space, inside: np.ndarray) -> np.ndarray:
    """Distance from each vertex to the nearest vertex outside the set (upper bound for graphs)."""
    outside = np.flatnonzero(~inside)
    if len(outside) == 0:
        return np.full(space.n, np.inf)
    if space.metric.get("kind") == "euclidean":
        from scipy.spatial import cKDTree
        dist, _ = cKDTree(space.positions[outside]).query(space.positions)
        return dist
    return csgraph.dijkstra(space.lengths_matrix, directed=False, indices=outside, min_only=True)


def wiener_decay_fit(u, x: int, radii, E=None, tol: float = COMPLEMENTARITY_TOL) -> dict:
    """Fit 1 - u ~ C d^alpha at dyadic radii around a boundary vertex x.

    With E given, also evaluates the levelwise exponential bound: the local
    potential of E & B_1 in B_0 = B_{2 r_1}(x) against exp(-C sum_j a_j) with
    a_j the relative capacities of E & B_j in B_{j-1}; C is fitted as the
    largest constant for which every level holds.
    """
    u = u.potential if isinstance(u, CapacityResult) else u
    space = u.space
    radii = np.sort(np.asarray(radii, dtype=float))[::-1]
    d = space.distances_from(x)
    sups = []
    for r in radii:
        ball = (d <= r * (1 + 1e-12)) & u.mask
        sups.append(float(np.max(1 - u.values[ball])))
    sups = np.array(sups)
    usable = sups > 1e-12
    out = {"radii": radii.tolist(), "sup": sups.tolist(), "flagged": False}
    if not usable.any():
        out.update(alpha=math.nan, C=math.nan, flagged=True, pointwiseBound=[])
        return out
    if usable.sum() < 3:
        raise PreconditionError("fewer than 3 usable dyadic levels")
    slope, icpt = np.polyfit(np.log(radii[usable]), np.log(sups[usable]), 1)
    out["alpha"] = float(slope)
    out["C"] = float(math.exp(icpt))
    out["pointwiseBound"] = (math.exp(icpt) * radii ** slope).tolist()
    if E is not None:
        out["levelwise"] = _levelwise_bound(space, E, x, radii, tol)
    return out


def _levelwise_bound(space: Space, E, x: int, radii: np.ndarray, tol: float) -> dict:
    inE = _indicator(space, _as_index(space, E))
    d = space.distances_from(x)
    balls = [np.flatnonzero(d < 2 * radii[0])] + [np.flatnonzero(d < r) for r in radii]
    E1 = balls[1][inE[balls[1]]]
    local = solve_obstacle(space, E1, balls[0], tol)
    a = []
    for j in range(1, len(balls)):
        Bj, Bprev = balls[j], balls[j - 1]
        interior = _shrink(space, Bj, Bprev)
        num = solve_obstacle(space, interior[inE[interior]], Bprev, tol).capacity
        den = solve_obstacle(space, interior, Bprev, tol).capacity
        a.append(num / den)
    a = np.array(a)
    sums = np.cumsum(a)
    gaps = []
    for i, Bi in enumerate(balls[1:]):
        worst = float(np.max(1 - local.potential.values[Bi]))
        gaps.append(worst)
    gaps = np.array(gaps)
    with np.errstate(divide="ignore"):
        cands = np.where(gaps > 0, -np.log(np.maximum(gaps, 1e-300)) / np.maximum(sums, 1e-300), np.inf)
    C = float(np.min(cands))
    return {"a": a.tolist(), "sup_one_minus_u": gaps.tolist(), "C": C, "holds": bool(C > 0)}


def _shrink(space: Space, inner: np.ndarray, outer: np.ndarray) -> np.ndarray:
    """Vertices of inner not on the boundary ring of outer (keeps E compactly inside)."""
    inO = _indicator(space, outer)
    ring = space.boundary | (space.adjacency.astype(bool) @ (~inO).astype(np.int8) > 0)
    return inner[~ring[inner]]


def prop_lower_bound_ratio(space: Space, E, x: int, r: float, tol: float = COMPLEMENTARITY_TOL) -> dict:
    """min over B_r(x) of the potential of E in B_2r(x), and the capacity ratio."""
    d = space.distances_from(x)
    Br = np.flatnonzero(d < r)
    B2 = np.flatnonzero(d < 2 * r)
    E = _as_index(space, E)
    res = solve_obstacle(space, E, B2, tol)
    ref = solve_obstacle(space, _shrink(space, Br, B2), B2, tol)
    ratio = res.capacity / ref.capacity
    return {"min_u": float(res.potential.values[Br].min()), "ratio": ratio}


def ball_vertices(space: Space, center, radius: float) -> np.ndarray:
    return vertices_in_ball(space, center, radius)
