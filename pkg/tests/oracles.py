"""Independent closed forms and quadratures used as test oracles."""
import math

import numpy as np
from scipy.integrate import dblquad, quad


def truncated_ball_capacity(a: float, R: float) -> float:
    """Capacity of the ball of radius a inside the ball of radius R in R^3."""
    return 4 * math.pi / (1 / a - 1 / R)


def truncated_ball_potential(r, a: float, R: float):
    return (1 / np.asarray(r) - 1 / R) / (1 / a - 1 / R)


class ProlateSpheroid:
    """Exterior potential of the prolate spheroid (x/a)^2 + (y^2 + z^2)/b^2 <= 1 in R^3.

    In prolate spheroidal coordinates (xi, eta) with focal distance f the
    potential is arccoth(xi) / arccoth(xi0); level integrals are 1-D
    quadratures in eta.
    """

    def __init__(self, a: float = 3.0, b: float = 1.5):
        self.a, self.b = a, b
        self.f = math.sqrt(a * a - b * b)
        self.xi0 = a / self.f
        self.q0 = math.atanh(1 / self.xi0)

    def u(self, xi):
        return np.arctanh(1 / xi) / self.q0

    def du(self, xi):
        return -1 / (xi * xi - 1) / self.q0

    def xi_of(self, t):
        return 1 / math.tanh(t * self.q0)

    def U(self, beta: float, t: float) -> float:
        """t^(-2 beta) times the level integral of |grad u|^(beta+1) (N = 3)."""
        x, f = self.xi_of(t), self.f

        def g(e):
            grad = math.sqrt((x * x - 1) / (f * f * (x * x - e * e))) * abs(self.du(x))
            area = f * f * math.sqrt(x * x - e * e) * math.sqrt(x * x - 1)
            return grad ** (beta + 1) * area
        val = quad(g, -1, 1, epsabs=1e-13, epsrel=1e-12)[0]
        return 2 * math.pi * t ** (-2 * beta) * val

    def dU(self, beta: float, t: float, h: float = 1e-5) -> float:
        return (self.U(beta, t + h) - self.U(beta, t - h)) / (2 * h)

    def lower_bound(self, beta: float, t: float) -> float:
        """C_beta / t^2 times the integral over {u < t} of u^2 |grad |grad v|^(beta/2)|^2, v = 1/u."""
        f = self.f
        C = 4 / beta * (beta - 0.5)
        x1 = self.xi_of(t)

        def w(x, e):
            hx = f * math.sqrt((x * x - e * e) / (x * x - 1))
            vp = -self.du(x) / self.u(x) ** 2
            return (abs(vp) / hx) ** (beta / 2)

        def integrand(e, s):
            x = x1 / s
            dx = x1 / s ** 2
            hx = f * math.sqrt((x * x - e * e) / (x * x - 1))
            he = f * math.sqrt((x * x - e * e) / (1 - e * e))
            hp = f * math.sqrt((x * x - 1) * (1 - e * e))
            d = 1e-6 * x
            wx = (w(x + d, e) - w(x - d, e)) / (2 * d)
            e1, e2 = max(e - 1e-6, -1 + 1e-12), min(e + 1e-6, 1 - 1e-12)
            we = (w(x, e2) - w(x, e1)) / (e2 - e1)
            g2 = wx ** 2 / hx ** 2 + we ** 2 / he ** 2
            return 2 * math.pi * self.u(x) ** 2 * g2 * hx * he * hp * dx
        val = dblquad(integrand, 1e-6, 1, lambda s: -1 + 1e-9, lambda s: 1 - 1e-9, epsabs=1e-10, epsrel=1e-7)[0]
        return C / t ** 2 * val


def lattice_green_free(d):
    """Continuum Green function 1/(4 pi d) of R^3."""
    return 1 / (4 * math.pi * np.asarray(d))


def lattice_green_origin() -> float:
    """Unit-spacing cubic lattice Green function at the pole, (2 pi)^-3 int dk / (6 - 2 sum cos k).

    The k3 integral is done in closed form, int_0^pi dk / (a - cos k) = pi / sqrt(a^2 - 1).
    """
    f = lambda k2, k1: 1 / (2 * math.sqrt((3 - math.cos(k1) - math.cos(k2)) ** 2 - 1))
    val, _ = dblquad(f, 0, math.pi, 0, math.pi, epsabs=1e-10, epsrel=1e-10)
    return val / math.pi ** 2
