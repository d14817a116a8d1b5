import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monocap.errors import PreconditionError
from monocap.green import (HeatKernelEngine, green_as_exterior_solution, green_function, green_sandwich_check,
                           green_shell, harmonic_residual, kernel_band, nonparabolic_test, quasi_green)
from monocap.mmspace import build_lattice, build_radial, matched_ball, nearest_vertex

from oracles import lattice_green_origin


@pytest.fixture(scope="module")
def small():
    L = build_lattice(3, 3, 0.5)
    return L, nearest_vertex(L, np.zeros(3)), HeatKernelEngine(L)


class TestHeatKernel:
    def test_methods_agree(self, small):
        L, c, eng = small
        other = HeatKernelEngine(L, method="expm")
        for t in (0.1, 1.0, 3.0):
            assert np.max(np.abs(other.kernel(t, c) - eng.kernel(t, c))) < 1e-10

    @given(st.floats(0.01, 50.0))
    @settings(max_examples=25, deadline=None)
    def test_mass_is_conserved(self, t):
        L = build_lattice(2, 2, 0.5)
        eng = HeatKernelEngine(L)
        p = eng.kernel(t, 3)
        assert np.sum(p * L.measure) == pytest.approx(1.0, abs=1e-10)
        assert np.all(p > -1e-12)

    def test_symmetry(self, small):
        L, c, eng = small
        assert eng.kernel(0.7, c)[5] == pytest.approx(eng.kernel(0.7, 5)[c], rel=1e-10)

    def test_equilibrium(self, small):
        L, c, eng = small
        assert np.allclose(eng.kernel(1e4, c), 1 / L.total_measure, rtol=1e-6)

    def test_quadrature_matches_spectrum(self, small):
        L, c, eng = small
        q = green_function(eng, c, 0.5, 5.0, 1e-3, tol=1e-8).values
        exact = eng.time_integral(c, 1e-3, 5.0)
        assert np.max(np.abs(q - exact)) / np.max(exact) < 1e-6

    def test_quasi_green_is_harmonic_up_to_constant(self, small):
        L, c, eng = small
        g = quasi_green(eng, c, 1e-9).values
        lap = -(L.stiffness @ g) / L.measure
        mask = np.ones(L.n, bool)
        mask[c] = False
        # Laplacian of the quasi-Green function is the constant 1/m(X) away from the pole
        assert np.allclose(lap[mask], 1 / L.total_measure, atol=1e-6)

    def test_bad_time(self, small):
        with pytest.raises(PreconditionError):
            small[2].kernel(0.0, 0)

    def test_band(self, small):
        L, c, eng = small
        band = kernel_band(eng, c, [0.5, 1.0], [0.5, 1.0])
        assert band


class TestShell:
    def test_free_lattice_green(self):
        L = build_lattice(3, 6, 0.5)
        c = nearest_vertex(L, np.zeros(3))
        G = green_shell(L, c, 6.0)
        d = np.linalg.norm(L.positions, axis=1)
        # the pole value is the lattice Green function at the origin, rescaled by h
        free0 = lattice_green_origin() / 0.5
        assert G.values[c] == pytest.approx(free0 - 1 / (4 * math.pi * 6.0), rel=0.01)
        assert harmonic_residual(L, G, np.flatnonzero((d >= 6.0) | L.boundary | (d == 0))) < 1e-8

    def test_sandwich_and_exterior(self):
        L = build_lattice(3, 6, 0.5)
        c = nearest_vertex(L, np.zeros(3))
        G = green_shell(L, c)
        d = np.linalg.norm(L.positions, axis=1)
        ys = np.flatnonzero((d > 1) & (d < 3))[:20]
        assert green_sandwich_check(L, c, G, ys)["Cfit"] >= 1
        ext = green_as_exterior_solution(L, G, matched_ball(L, c, 1.0))
        assert ext.meta["boundary_min"] == pytest.approx(1.0)
        assert ext.meta["harmonic"]


class TestParabolicity:
    def test_radial(self):
        assert nonparabolic_test(build_radial(3, 1, 10), s_max=10).classification == "nonparabolic"
        assert nonparabolic_test(build_radial(2, 1, 10)).classification == "parabolic"

    def test_low_dimension_gate(self):
        res = nonparabolic_test(build_lattice(2, 12, 0.5))
        assert res.classification == "parabolic"
        assert res.growth_exponent == pytest.approx(2, abs=0.2)

    def test_too_small(self):
        with pytest.raises(PreconditionError):
            nonparabolic_test(build_lattice(3, 1, 0.5))


class TestInvariantsGreen:
    def test_semigroup(self, small):
        L, c, eng = small
        s, t = 0.4, 0.9
        direct = eng.kernel(s + t, c)
        comp = np.zeros(L.n)
        for z in range(L.n):
            comp += L.measure[z] * eng.kernel(s, c)[z] * eng.kernel(t, z)
        assert np.max(np.abs(direct - comp)) < 1e-10

    def test_shell_symmetry(self):
        L = build_lattice(3, 3, 0.5)
        a, b = nearest_vertex(L, np.array([0.5, 0, 0])), nearest_vertex(L, np.array([-1.0, 0.5, 0]))
        Ga, Gb = green_shell(L, a), green_shell(L, b)
        assert Ga.values[b] == pytest.approx(Gb.values[a], rel=1e-9)

    def test_kernel_band_is_bounded(self):
        L = build_lattice(3, 4, 0.5)
        c = nearest_vertex(L, np.zeros(3))
        band = kernel_band(HeatKernelEngine(L, method="expm"), c, [0.5, 1.0, 2.0], [0.5, 1.0, 1.5])
        lo, hi = band["min"], band["max"]
        assert 0 < lo <= hi < np.inf
