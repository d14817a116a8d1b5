"""Level sets, the monotone functional U_beta, its derivative estimators and decay bounds.

Conventions: for a field u that decays away from an obstacle, the sublevel set
{u < t} is the outer region and U_beta(t) integrates |grad u|^(beta+1) u^(-beta kappa)
over the level {u = t}, kappa = (N-1)/(N-2). On graphs two estimators are offered:

* ``cutEdge`` sums over edges whose endpoints straddle t. Each edge carries the
  coarea weight w |du| / |grad u|_e, so that the sum over cut edges of this
  weight approximates the (isotropic) perimeter.
* ``mollified`` replaces the level integral by a volume integral against a
  narrow kernel in u, which is what the coarea formula gives.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .errors import PreconditionError
from .mmspace import (RadialField, ScalarField, Space, as_values, covector_norm, gradient_inner_values,
                      gradient_norm_values, gradient_vectors, stencil_mask)

GRAD_FLOOR = 1e-12
U_FLOOR = 1e-14


def kappa(N: float) -> float:
    if N <= 2:
        raise PreconditionError("kappa needs N > 2")
    return (N - 1) / (N - 2)


def critical_beta(N: float) -> float:
    return (N - 2) / (N - 1)


def harmonic_exponent_constant(beta: float, N: float) -> float:
    """C_{beta,N} = (4/beta)(beta - (N-2)/(N-1))."""
    if beta <= 0:
        raise PreconditionError("beta must be positive")
    if beta == critical_beta(N):
        return 0.0
    return 4.0 / beta * (beta - critical_beta(N))


def _check_beta(beta: float):
    if beta <= -2:
        raise PreconditionError("beta must exceed -2")


# -- graph helpers -------------------------------------------------------------

def _field_parts(u):
    if not isinstance(u, ScalarField):
        raise PreconditionError("expected a graph field")
    return u.space, u.values, u.mask


def _grad(space: Space, vals: np.ndarray, mask: np.ndarray):
    ok = stencil_mask(space, mask)
    g = gradient_norm_values(space, np.where(mask, vals, 0.0))
    return g, ok


def _field_grad(u: ScalarField):
    return u.derived("grad", lambda: _grad(u.space, u.values, u.mask))


def _field_lsq(u: ScalarField):
    return u.derived("lsq", lambda: covector_norm(u.space, gradient_vectors(u.space, np.where(u.mask, u.values, 0.0))))


def level_set(u: ScalarField, t: float) -> np.ndarray:
    space, vals, mask = _field_parts(u)
    lo, hi = float(vals[mask].min()), float(vals[mask].max())
    if t <= lo:
        raise PreconditionError(f"level {t} below the range [{lo:.3g}, {hi:.3g}]")
    return np.flatnonzero(mask & (vals < t))


def _cut_edges(space: Space, vals: np.ndarray, mask: np.ndarray, t: float):
    a, b = space.edges[:, 0], space.edges[:, 1]
    both = mask[a] & mask[b]
    lo = np.minimum(vals[a], vals[b])
    hi = np.maximum(vals[a], vals[b])
    cut = both & (lo < t) & (t <= hi)
    return np.flatnonzero(cut)


def _crossing_gradient(space, vals, grad, e, t):
    """Harmonic interpolation of vertex gradient norms at the crossing parameter."""
    a, b = space.edges[e, 0], space.edges[e, 1]
    ua, ub = vals[a], vals[b]
    theta = np.clip((t - ua) / (ub - ua), 0.0, 1.0)
    ga, gb = np.maximum(grad[a], GRAD_FLOOR), np.maximum(grad[b], GRAD_FLOOR)
    return 1.0 / ((1 - theta) / ga + theta / gb)


def perimeter(u: ScalarField, t: float, weighting: str = "coarea") -> float:
    """Perimeter of {u < t} from the edges cut by the level.

    weighting="raw" sums w * length over cut edges (h^(N-1) per cut face on a
    lattice, an anisotropic measure); "coarea" uses w |du| / |grad u|_e.
    """
    space, vals, mask = _field_parts(u)
    hi = float(vals[mask].max())
    if t <= float(vals[mask].min()):
        raise PreconditionError(f"level {t} below the field range")
    if t > hi:
        warnings.warn("level above the field range: only the outer cut remains")
        a, b = space.edges[:, 0], space.edges[:, 1]
        outer = mask[a] != mask[b]
        return float(np.sum(space.weight[outer] * space.length[outer]))
    e = _cut_edges(space, vals, mask, t)
    if weighting == "raw":
        return float(np.sum(space.weight[e] * space.length[e]))
    if weighting != "coarea":
        raise PreconditionError(f"unknown perimeter weighting {weighting!r}")
    grad, _ = _field_grad(u)
    du = np.abs(vals[space.edges[e, 1]] - vals[space.edges[e, 0]])
    return float(np.sum(space.weight[e] * du / _crossing_gradient(space, vals, grad, e, t)))


def hat_kernel(s: np.ndarray, eps: float) -> np.ndarray:
    return np.maximum(0.0, 1.0 - np.abs(s) / eps) / eps


def cosine_kernel(s: np.ndarray, eps: float) -> np.ndarray:
    return np.where(np.abs(s) < eps, (1 + np.cos(np.pi * s / eps)) / (2 * eps), 0.0)


KERNELS = {"hat": hat_kernel, "cosine": cosine_kernel}


def default_eps(t: float, spacing: float | None) -> float:
    """Half-width 2 * grid spacing, capped at 15% of the level for scale covariance."""
    cap = 0.15 * t
    return cap if spacing is None else min(2.0 * spacing, cap)


def _band_check(space, vals, ok, t, eps, grad):
    band = ok & (np.abs(vals - t) < eps)
    if band.sum() < 8:
        raise PreconditionError(f"mollifier half-width {eps:.3g} below grid resolution at t={t}")
    e = _cut_edges(space, vals, ok, t)
    if len(e):
        step = np.median(np.abs(vals[space.edges[e, 1]] - vals[space.edges[e, 0]]))
        if eps < 0.5 * step:
            raise PreconditionError(f"mollifier half-width {eps:.3g} below the per-edge variation {step:.3g}")
    return band


# -- U_beta ------------------------------------------------------------------------

def _radial_level(u: RadialField, t: float):
    r = u.inverse(t)
    s = u.space
    if not (s.r_min <= r <= s.r_max * (1 + 1e-12)):
        raise PreconditionError(f"level {t} outside the radial domain")
    return r


def U_beta(u, beta: float, t: float, estimator: str = "mollified", eps: float | None = None,
           spacing: float | None = None, kernel: str = "hat", N: float | None = None,
           gradient_values: np.ndarray | None = None) -> float:
    """t^(-beta kappa) times the level integral of |grad u|^(beta+1).

    gradient_values replaces the computed vertex gradient norms, e.g. to feed
    a different representative of |grad u|.
    """
    _check_beta(beta)
    if isinstance(u, RadialField):
        s = u.space
        k = kappa(s.N)
        r = _radial_level(u, t)
        return float(t ** (-beta * k) * s.cross_section_mass * r ** (s.N - 1) * abs(u.d1(r)) ** (beta + 1))
    space, vals, mask = _field_parts(u)
    k = kappa(space.N if N is None else N)
    grad, ok = _field_grad(u)
    if gradient_values is not None:
        grad = np.asarray(gradient_values, dtype=float)
    if estimator == "cutEdge":
        e = _cut_edges(space, vals, ok, t)
        if len(e) == 0:
            raise PreconditionError(f"level {t} does not cut the solved region")
        du = np.abs(vals[space.edges[e, 1]] - vals[space.edges[e, 0]])
        ge = _crossing_gradient(space, vals, grad, e, t)
        return float(t ** (-beta * k) * np.sum(space.weight[e] * du * ge ** beta))
    if estimator != "mollified":
        raise PreconditionError(f"unknown estimator {estimator!r}")
    eps = default_eps(t, spacing) if eps is None else eps
    band = _band_check(space, vals, ok, t, eps, grad)
    delta = KERNELS[kernel](vals[band] - t, eps)
    uu = np.maximum(vals[band], U_FLOOR)
    return float(np.sum(space.measure[band] * delta * grad[band] ** (beta + 2) * uu ** (-beta * k)))


def _radial_derivative(u: RadialField, beta: float, t: float) -> float:
    s = u.space
    k = kappa(s.N)
    r = _radial_level(u, t)
    u0, u1, u2 = float(u(r)), float(u.d1(r)), float(u.d2(r))
    sg = math.copysign(1.0, u1)
    dg = (beta * abs(u1) ** (beta - 1) * sg * u2 * u0 ** (-beta * k)
          - beta * k * abs(u1) ** beta * u0 ** (-beta * k - 1) * u1)
    return float(s.cross_section_mass * r ** (s.N - 1) * sg * dg)


def U_beta_derivative(u, beta: float, t: float, eps: float | None = None, spacing: float | None = None,
                      kernel: str = "hat", N: float | None = None, gradient: str = "auto") -> dict:
    """Flux form: level integral of <grad u, grad g> / |grad u| with g = |grad u|^beta u^(-beta kappa).

    gradient="lsq" evaluates |grad u| inside g from least-squares differentials;
    the edge norm carries an isotropic O(h^2) bias whose radial variation feeds
    straight into grad g. "auto" picks lsq whenever chart positions exist.
    """
    _check_beta(beta)
    if isinstance(u, RadialField):
        return {"flux": _radial_derivative(u, beta, t), "excluded": 0}
    space, vals, mask = _field_parts(u)
    k = kappa(space.N if N is None else N)
    grad, ok = _field_grad(u)
    if gradient == "auto":
        gradient = "lsq" if space.positions is not None else "edge"
    if gradient == "lsq":
        gnorm = _field_lsq(u)
    elif gradient == "edge":
        gnorm = grad
    else:
        raise PreconditionError(f"unknown gradient {gradient!r}")
    small = ok & (gnorm < GRAD_FLOOR)
    g = np.where(ok, np.maximum(gnorm, GRAD_FLOOR) ** beta * np.maximum(vals, U_FLOOR) ** (-beta * k), 0.0)
    ok2 = stencil_mask(space, ok) & ~small
    inner = gradient_inner_values(space, vals, g)
    eps = default_eps(t, spacing) if eps is None else eps
    band = _band_check(space, vals, ok2, t, eps, grad)
    delta = KERNELS[kernel](vals[band] - t, eps)
    # u decreases outward, so the outer normal of {u < t} is grad u / |grad u|
    flux = float(np.sum(space.measure[band] * delta * inner[band]))
    return {"flux": flux, "excluded": int(np.sum(small & (np.abs(vals - t) < eps)))}


def second_order_lower_bound(u, beta: float, t: float, N: float | None = None) -> float:
    """(C_{beta,N}/t^2) int_{u<t} u^2 |grad |grad v|^(beta/2)|^2, v = u^(1/(2-N))."""
    Nn = u.space.N if N is None else N
    if Nn <= 2:
        raise PreconditionError("lower bound needs N > 2")
    if beta < critical_beta(Nn) - 1e-15:
        raise PreconditionError("lower bound needs beta >= (N-2)/(N-1)")
    C = harmonic_exponent_constant(beta, Nn)
    if C == 0.0:
        return 0.0
    if isinstance(u, RadialField):
        s = u.space
        p = 1.0 / (2 - Nn)

        def integrand(r):
            uu = max(float(u(r)), U_FLOOR)
            dv = p * uu ** (p - 1) * float(u.d1(r))
            d2v = p * (p - 1) * uu ** (p - 2) * float(u.d1(r)) ** 2 + p * uu ** (p - 1) * float(u.d2(r))
            dw = (beta / 2) * abs(dv) ** (beta / 2 - 1) * math.copysign(1.0, dv) * d2v
            return s.cross_section_mass * r ** (Nn - 1) * uu * uu * dw * dw

        r0 = _radial_level(u, t)
        r1 = s.r_max
        if float(u(r1)) <= 0:
            r1 = u.inverse(0.0)  # truncated fields vanish at the shell
        val, _ = quad(integrand, r0, r1, limit=200, epsabs=1e-14, epsrel=1e-12)
        return float(C / t ** 2 * val)
    space, vals, mask = _field_parts(u)

    def density():
        v = np.where(mask, np.maximum(vals, U_FLOOR) ** (1.0 / (2 - Nn)), 0.0)
        gv, ok1 = _grad(space, v, mask)
        w = np.where(ok1, gv ** (beta / 2), 0.0)
        gw, ok2 = _grad(space, w, ok1)
        return np.where(ok2, space.measure * vals ** 2 * gw ** 2, 0.0)

    dens = u.derived(("lower", beta, Nn), density)
    return float(C / t ** 2 * np.sum(dens[vals < t]))


# -- report --------------------------------------------------------------------------

@dataclass
class MonotoneReport:
    beta: float
    t_grid: np.ndarray
    U: np.ndarray
    Uprime_flux: np.ndarray
    Uprime_fd: np.ndarray
    lower_bound: np.ndarray
    monotone: bool
    slack: float
    derivative_slack: float = 0.0
    U_cut: np.ndarray | None = None
    Ut2_monotone: bool = True
    lower_bound_holds: bool = True
    sup_half: float = math.nan
    variation: float = 0.0
    notes: list = field(default_factory=list)

    def rows(self):
        return [(float(t), float(a), float(b), float(c), float(d)) for t, a, b, c, d in
                zip(self.t_grid, self.U, self.Uprime_flux, self.Uprime_fd, self.lower_bound)]

    def to_dict(self) -> dict:
        out = {k: v for k, v in self.__dict__.items()}
        for k, v in out.items():
            if isinstance(v, np.ndarray):
                out[k] = v.tolist()
        return out


def monotonicity_report(u, beta: float, t_grid, estimator: str = "cutEdge", slack: float | None = None,
                        eps: float | None = None, kernel: str = "hat", N: float | None = None) -> MonotoneReport:
    t_grid = np.asarray(t_grid, dtype=float)
    if len(t_grid) < 5:
        raise PreconditionError("t grid too coarse (needs at least 5 points)")
    if np.any(np.diff(t_grid) <= 0):
        raise PreconditionError("t grid must be increasing")
    spacing = float(np.min(np.diff(t_grid)))
    radial = isinstance(u, RadialField)
    kw = dict(eps=eps, spacing=spacing, kernel=kernel, N=N) if not radial else {}
    U = np.array([U_beta(u, beta, t, estimator, **kw) for t in t_grid])
    U_cut = None
    if not radial:
        other = "cutEdge" if estimator == "mollified" else "mollified"
        U_cut = np.array([U_beta(u, beta, t, other, **kw) for t in t_grid])
    flux = np.array([U_beta_derivative(u, beta, t, **kw)["flux"] for t in t_grid])
    fd = np.gradient(U, t_grid)
    lb = np.array([second_order_lower_bound(u, beta, t, N) if beta >= critical_beta(N or u.space.N) - 1e-15
                   else math.nan for t in t_grid])
    if slack is None:
        if radial:
            slack = 1e-10 * max(1.0, float(np.median(np.abs(U))))
        else:
            disagreement = float(np.median(np.abs(U - U_cut)))
            slack = max(0.02 * float(np.median(U)), 10 * disagreement)
    dslack = slack / (t_grid[-1] - t_grid[0])
    monotone = bool(np.all(np.diff(U) >= -slack))
    ut2 = flux * t_grid ** 2
    ut2_ok = bool(np.all(np.diff(ut2) >= -dslack * t_grid[-1] ** 2))
    lb_ok = bool(np.all((flux >= np.nan_to_num(lb) - dslack) & (fd >= np.nan_to_num(lb) - dslack)))
    half = t_grid < 0.5
    sup_half = float(np.max(U[half])) if half.any() else math.nan
    variation = float((U.max() - U.min()) / np.mean(np.abs(U)))
    return MonotoneReport(beta, t_grid, U, flux, fd, lb, monotone, slack, dslack, U_cut, ut2_ok, lb_ok,
                          sup_half, variation)


def scaled_field(u, c: float):
    """u / c as a field of the same kind."""
    if isinstance(u, RadialField):
        return u.scaled(1.0 / c)
    return u.with_values(u.values / c)


# -- decay estimates ----------------------------------------------------------------

def decay_check(u: ScalarField, x0: int, omega_c=None, grad_ceiling: float = 2.0, upper_ceiling: float = 100.0) -> dict:
    """Pointwise lower bound delta^(N-2)/2 d^(2-N) <= u and fitted upper and gradient constants."""
    from .green import growth_integral
    from .mmspace import ball_masses

    space, vals, mask = _field_parts(u)
    N = space.N
    d = space.distances_from(x0)
    inside = np.zeros(space.n, dtype=bool)
    if omega_c is not None:
        inside[np.asarray(omega_c, dtype=np.int64)] = True
    low = mask & (vals <= 0.5)
    if not low.any():
        raise PreconditionError("{u <= 1/2} is empty within the extent")
    delta = min(float(d[low].min()), 1.0)
    region = mask & ~inside & (d > 0)
    bound = delta ** (N - 2) / 2 * d[region] ** (2 - N)
    lower_gap = vals[region] - bound
    lower_ok = bool(np.all(lower_gap >= -1e-12))
    grad, ok = _grad(space, vals, mask)
    gsel = ok & region & (vals > 0)
    ratios = grad[gsel] / vals[gsel] * d[gsel]
    C_grad = float(np.max(ratios))
    out = {"delta": delta, "lowerOK": lower_ok, "lowerWorst": float(np.min(lower_gap)),
           "gradC": C_grad, "gradOK": C_grad <= grad_ceiling, "lowerCount": int(region.sum())}
    safe = space.safe_radius(x0)
    usel = region & (d < 0.8 * safe) & (d >= float(np.min(space.length)))
    try:
        m1 = ball_masses(space, x0, [1.0])[0]
        I = growth_integral(space, x0, d[usel]) * m1
        C2 = float(np.max(vals[usel] / I))
        out.update(upperC=C2, upperOK=C2 <= upper_ceiling)
    except PreconditionError as exc:
        out.update(upperC=math.nan, upperOK=False, upperNote=str(exc))
    return out


def radial_decay_check(u: RadialField, samples: int = 200) -> dict:
    s = u.space
    r = np.geomspace(s.r_min, s.r_max, samples)
    vals = u(r)
    low = r[vals <= 0.5]
    if len(low) == 0:
        raise PreconditionError("{u <= 1/2} is empty within the extent")
    delta = min(float(low.min()), 1.0)
    N = s.N
    lower_gap = vals - delta ** (N - 2) / 2 * r ** (2 - N)
    C = float(np.max(np.abs(u.d1(r)) / vals * r))
    return {"delta": delta, "lowerOK": bool(np.all(lower_gap >= -1e-12)), "gradC": C, "gradOK": C <= 2.0}
