"""Heat kernels, Green functions and volume-growth classification."""
from __future__ import annotations

import bisect
import math
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import eigh
from scipy.sparse.linalg import expm_multiply

from .errors import PreconditionError, SolverError
from .mmspace import ScalarField, Space, as_values, ball_masses
from .potential import LINEAR_TOL, LinearSolver, _as_index, _indicator

EIGEN_SIZE_CAP = 4000


@dataclass
class HeatKernelEngine:
    """p_t(x, y) for the weighted Laplacian with free (Neumann) boundary."""

    space: Space
    method: str = "auto"
    size_cap: int = EIGEN_SIZE_CAP
    _eig: tuple | None = field(default=None, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)
    _paths: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.space.is_radial:
            raise PreconditionError("heat kernels are computed on graph spaces")
        if self.method == "auto":
            self.method = "eigen" if self.space.n <= self.size_cap else "expm"
        if self.method not in ("eigen", "expm"):
            raise PreconditionError(f"unknown heat kernel method {self.method!r}")
        if self.method == "eigen" and self.space.n > self.size_cap:
            raise PreconditionError(f"spectral method capped at {self.size_cap} vertices (got {self.space.n})")

    @property
    def spectrum(self) -> tuple[np.ndarray, np.ndarray]:
        """Eigenvalues and measure-normalized eigenvectors psi with psi^T M psi = I."""
        with self._lock:
            if self._eig is None:
                s = 1 / np.sqrt(self.space.measure)
                A = (self.space.stiffness.toarray() * s[:, None]) * s[None, :]
                lam, phi = eigh(A)
                lam[0] = max(lam[0], 0.0)
                self._eig = (np.maximum(lam, 0.0), phi * s[:, None])
            return self._eig

    @property
    def generator(self) -> sp.csr_matrix:
        return (sp.diags(1 / self.space.measure) @ self.space.stiffness).tocsr()

    def kernel(self, t: float, x: int) -> np.ndarray:
        if not t > 0:
            raise PreconditionError("t must be positive")
        x = int(x)
        if self.method == "eigen":
            lam, psi = self.spectrum
            return psi @ (np.exp(-lam * t) * psi[x])
        # propagate from the latest cached time below t
        with self._lock:
            times, vals = self._paths.setdefault(x, ([0.0], [None]))
            k = bisect.bisect_right(times, t) - 1
            t0, f0 = times[k], vals[k]
        if f0 is None:
            f0 = np.zeros(self.space.n)
            f0[x] = 1 / self.space.measure[x]
        f = expm_multiply(-(t - t0) * self.generator, f0) if t > t0 else f0
        with self._lock:
            if t not in times:
                j = bisect.bisect_right(times, t)
                times.insert(j, t)
                vals.insert(j, f)
        return f

    def time_integral(self, x: int, a: float, b: float) -> np.ndarray:
        """Exact int_a^b p_t(x, .) dt from the spectrum."""
        lam, psi = self.spectrum
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(lam > 1e-12 * max(lam[-1], 1.0),
                         (np.exp(-lam * a) - np.exp(-lam * b)) / np.where(lam > 0, lam, 1.0), b - a)
        return psi @ (w * psi[int(x)])


def heat_kernel(engine: HeatKernelEngine, t: float, x: int) -> ScalarField:
    return ScalarField(engine.space, engine.kernel(t, x), meta={"t": t, "pole": int(x)})


def _adaptive_simpson_log(f, a: float, b: float, tol: float, max_depth: int = 40):
    """Adaptive Simpson for vector integrands in tau = log t."""
    evals = [0]

    def g(tau):
        evals[0] += 1
        t = math.exp(tau)
        return t * f(t)

    def simpson(ta, tb, fa, fm, fb):
        return (tb - ta) / 6 * (fa + 4 * fm + fb)

    def rec(ta, tb, fa, fm, fb, S, eps, depth):
        tm = 0.5 * (ta + tb)
        fl, fr = g(0.5 * (ta + tm)), g(0.5 * (tm + tb))
        Sl, Sr = simpson(ta, tm, fa, fl, fm), simpson(tm, tb, fm, fr, fb)
        if np.max(np.abs(Sl + Sr - S)) <= 15 * eps:
            return Sl + Sr + (Sl + Sr - S) / 15
        if depth <= 0:
            raise SolverError("adaptive quadrature exceeded its depth budget")
        return (rec(ta, tm, fa, fl, fm, Sl, eps / 2, depth - 1)
                + rec(tm, tb, fm, fr, fb, Sr, eps / 2, depth - 1))

    ta, tb = math.log(a), math.log(b)
    fa, fm, fb = g(ta), g(0.5 * (ta + tb)), g(tb)
    S = simpson(ta, tb, fa, fm, fb)
    out = rec(ta, tb, fa, fm, fb, S, tol * max(np.max(np.abs(S)), 1e-300), max_depth)
    return out, evals[0]


def green_function(engine: HeatKernelEngine, x: int, t_split: float, t_max: float, eps: float | None = None,
                   tol: float = 1e-4, subtract_equilibrium: bool = False) -> ScalarField:
    """Time integral int_eps^t_max p_t(x, .) dt by adaptive quadrature in log t.

    The equilibrium part (t_max - eps)/m(X) is reported in the metadata and
    optionally removed.
    """
    if not t_split < t_max:
        raise PreconditionError("t_split must be smaller than t_max")
    space = engine.space
    if eps is None:
        eps = 1e-3 * float(np.min(space.length)) ** 2
    if not 0 < eps < t_split:
        raise PreconditionError("need 0 < eps < t_split")
    k = lambda t: engine.kernel(t, x)
    lo, n1 = _adaptive_simpson_log(k, eps, t_split, tol)
    hi, n2 = _adaptive_simpson_log(k, t_split, t_max, tol)
    vals = lo + hi
    equilibrium = (t_max - eps) / space.total_measure
    if subtract_equilibrium:
        vals = vals - equilibrium
    return ScalarField(space, vals, meta={"pole": int(x), "eps": eps, "t_max": t_max,
                                          "equilibrium": equilibrium, "evaluations": n1 + n2})


def quasi_green(engine: HeatKernelEngine, x: int, eps: float, t_max: float | None = None,
                tol: float = 1e-4) -> ScalarField:
    """int_eps^t_max p_t dt minus the equilibrium part; exact when the spectrum is available."""
    space = engine.space
    if not eps > 0:
        raise PreconditionError("eps must be positive")
    if engine.method == "eigen":
        lam, psi = engine.spectrum
        with np.errstate(divide="ignore"):
            w = np.where(lam > 1e-12 * max(lam[-1], 1.0), np.exp(-lam * eps) / np.where(lam > 0, lam, 1.0), 0.0)
        return ScalarField(space, psi @ (w * psi[int(x)]), meta={"pole": int(x), "eps": eps})
    if t_max is None:
        raise PreconditionError("t_max needed without the spectral method")
    split = math.sqrt(eps * t_max)
    return green_function(engine, x, split, t_max, eps, tol, subtract_equilibrium=True)


def green_shell(space: Space, x: int, r_out: float | None = None, tol: float = LINEAR_TOL) -> ScalarField:
    """Solve K G = e_x (so that Laplacian G = -delta_x / m(x)) with G = 0 on the shell.

    The shell is {d(x, .) >= r_out} plus the space's boundary vertices.
    """
    x = int(x)
    dist = space.distances_from(x)
    shell = space.boundary.copy()
    if r_out is not None:
        shell |= dist >= r_out
    shell[x] = False
    if not shell.any():
        raise PreconditionError("Green shell is empty")
    F = np.flatnonzero(~shell)
    K = space.stiffness[F][:, F]
    b = (F == x).astype(float)
    G = np.zeros(space.n)
    G[F] = LinearSolver(K, tol).solve(b)
    if np.any(G[F] <= 0):
        raise SolverError("Green function not positive off the shell")
    return ScalarField(space, G, meta={"pole": x, "r_out": r_out, "shell": np.flatnonzero(shell).size})


def harmonic_residual(space: Space, f, exclude: np.ndarray) -> float:
    vals = as_values(f)
    lap = -(space.stiffness @ vals) / space.measure
    keep = np.ones(space.n, dtype=bool)
    keep[exclude] = False
    return float(np.max(np.abs(lap[keep]))) if keep.any() else 0.0


@dataclass
class ParabolicityResult:
    classification: str
    integral: float
    growth_exponent: float
    growth_classification: str
    s_max: float
    reason: str


def nonparabolic_test(space: Space, x: int | None = None, s_max: float | None = None,
                      margin: float = 0.3, samples: int = 64) -> ParabolicityResult:
    """Volume-growth test of int_1^s_max s / m(B_s) ds."""
    if space.is_radial:
        N = space.N
        lam = float(N)
        if N > 2:
            integral = (1 - s_max ** (2 - N)) / ((N - 2) * space.cross_section_mass / N) if s_max else math.nan
        else:
            integral = math.inf
        cls = "nonparabolic" if N > 2 else "parabolic"
        return ParabolicityResult(cls, integral, lam, cls, s_max or math.inf, "radial model")
    if x is None:
        x = int(np.argmin(np.linalg.norm(space.positions - space.positions.mean(axis=0), axis=1))) \
            if space.positions is not None else 0
    safe = space.safe_radius(x)
    s_max = safe if s_max is None else min(s_max, safe)
    h = float(np.max(space.length))
    if s_max < 4 * h or s_max <= 1:
        raise PreconditionError(f"s_max {s_max:.3g} is below the resolvable range")
    s = np.geomspace(1.0, s_max, samples)
    m = ball_masses(space, x, s)
    integral = float(np.trapezoid(s / m, s))
    upper = s >= math.sqrt(s_max)
    if upper.sum() < 4:
        upper = s >= s[len(s) // 2]
    lam = float(np.polyfit(np.log(s[upper]), np.log(m[upper]), 1)[0])
    if lam > 2 + margin:
        growth = "nonparabolic"
    elif lam < 2 - margin:
        growth = "parabolic"
    else:
        growth = "inconclusive"
    if space.N <= 2:
        return ParabolicityResult("parabolic", integral, lam, growth, s_max,
                                  "dimension parameter N <= 2 excludes a positive Green function")
    return ParabolicityResult(growth, integral, lam, growth, s_max, "growth exponent")


def growth_integral(space: Space, x: int, d: np.ndarray, samples: int = 96) -> np.ndarray:
    """I(d) = int_d^inf s / m(B_s(x)) ds with a fitted power-law tail past the safe radius."""
    d = np.atleast_1d(np.asarray(d, dtype=float))
    safe = space.safe_radius(x)
    if np.any(d >= safe):
        raise PreconditionError("evaluation radius beyond the resolvable extent")
    s = np.geomspace(float(d.min()), safe, samples)
    m = ball_masses(space, x, s)
    upper = s >= s[int(0.6 * len(s))]
    lam, logA = np.polyfit(np.log(s[upper]), np.log(m[upper]), 1)
    if lam <= 2 + 1e-6:
        raise PreconditionError("tail of the growth integral does not converge on this extent")
    tail = safe ** (2 - lam) / (math.exp(logA) * (lam - 2))
    f = s / m
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(s))])
    total = cum[-1] + tail
    return total - np.interp(d, s, cum)


def green_sandwich_check(space: Space, x: int, G, y_grid, ceiling: float = 10.0) -> dict:
    """Smallest C >= 1 with I(d)/C <= G <= C I(d) over y_grid."""
    vals = as_values(G)
    y = np.asarray(y_grid, dtype=np.int64)
    d = space.distances_from(x)[y]
    I = growth_integral(space, x, d)
    ratio = vals[y] / I
    c_fit = float(max(np.max(ratio), np.max(1 / ratio), 1.0))
    return {"Cfit": c_fit, "holds": c_fit <= ceiling, "ratios": ratio.tolist(), "distances": d.tolist()}


def green_as_exterior_solution(space: Space, G, omega_c, tol: float = 1e-8) -> ScalarField:
    """lambda G with lambda = 1 / min of G over the boundary of the obstacle complement."""
    vals = as_values(G)
    pole = G.meta.get("pole") if isinstance(G, ScalarField) else None
    idx = _as_index(space, omega_c)
    in_c = _indicator(space, idx)
    if pole is not None and not in_c[pole]:
        raise PreconditionError("pole lies in the exterior region")
    rim = in_c & (space.adjacency.astype(bool) @ (~in_c).astype(np.int8) > 0)
    gmin = float(vals[rim].min())
    if not gmin > 0:
        raise PreconditionError("G is not positive on the boundary of the obstacle complement")
    out = vals / gmin
    zero = vals == 0
    exclude = np.flatnonzero(in_c | zero | (space.adjacency.astype(bool) @ zero.astype(np.int8) > 0)
                             | space.boundary)
    res = harmonic_residual(space, out, exclude)
    return ScalarField(space, out, meta={"lambda": 1 / gmin, "boundary_min": float(out[rim].min()),
                                         "harmonic_residual": res, "harmonic": res <= tol * max(1.0, out.max())})


def kernel_band(engine: HeatKernelEngine, x: int, times, radii) -> dict:
    """Range of p_t(x,y) m(B_sqrt(t)(x)) / exp(-d^2 / 4t) over sampled (t, d)."""
    space = engine.space
    dist = space.distances_from(x)
    vals = []
    for t in times:
        p = engine.kernel(t, x)
        mb = ball_masses(space, x, [math.sqrt(t)])[0]
        for r in radii:
            y = int(np.argmin(np.abs(dist - r)))
            vals.append(p[y] * mb / math.exp(-dist[y] ** 2 / (4 * t)))
    vals = np.array(vals)
    return {"min": float(vals.min()), "max": float(vals.max()), "width": float(vals.max() / vals.min())}
