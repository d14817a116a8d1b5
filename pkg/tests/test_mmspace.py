import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monocap.errors import BudgetExceeded, PreconditionError
from monocap.mmspace import (Space, avr_estimate, ball_mass, bishop_gromov_profile, build_cone, build_cylinder,
                             build_lattice, build_radial, bump_density, cone_distance, cone_measure_density,
                             cone_mesh_layout, dirichlet_energy, gradient_norm, gradient_norm_lsq,
                             gradient_vectors, laplacian, matched_ball, nearest_vertex)


class TestConeFormulas:
    def test_same_ray(self):
        assert cone_distance(2.0, 5.0, 0.0) == pytest.approx(3.0)

    def test_through_tip(self):
        assert cone_distance(2.0, 5.0, math.pi) == pytest.approx(7.0)
        assert cone_distance(2.0, 5.0, 4.0) == pytest.approx(7.0)

    def test_right_angle(self):
        assert cone_distance(1.0, 1.0, math.pi / 2) == pytest.approx(math.sqrt(2))

    def test_density(self):
        assert cone_measure_density(2.0, 3) == pytest.approx(4.0)

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10), st.floats(0, 4), st.floats(0, 4))
    @settings(max_examples=200, deadline=None)
    def test_triangle_inequality_on_rays(self, t, s, r, a, b):
        # three points on rays at angles 0, a, a + b of a circle cross-section
        dxy = cone_distance(t, s, a)
        dyz = cone_distance(s, r, b)
        dxz = cone_distance(t, r, a + b)
        assert dxz <= dxy + dyz + 1e-9
        assert cone_distance(t, s, a) == cone_distance(s, t, a)


class TestLattice:
    def test_sizes(self):
        L = build_lattice(3, 2, 0.5)
        assert L.n == 9 ** 3
        assert len(L.edges) == 3 * 8 * 81
        assert L.total_measure == pytest.approx(9 ** 3 * 0.125)

    def test_budget(self):
        with pytest.raises(BudgetExceeded):
            build_lattice(3, 10, 0.01)

    def test_bad_params(self):
        with pytest.raises(PreconditionError):
            build_lattice(2.5, 2, 0.5)
        with pytest.raises(PreconditionError):
            build_lattice(3, 1, 2)

    def test_laplacian_of_quadratic(self, lattice_small):
        f = 0.5 * np.sum(lattice_small.positions ** 2, axis=1)
        lap = laplacian(lattice_small, f)
        assert np.allclose(lap.values[lap.mask], 3.0)

    def test_gradient_of_linear(self, lattice_small):
        f = lattice_small.positions @ np.array([1.0, 2.0, -2.0])
        g = gradient_norm(lattice_small, f)
        assert np.allclose(g.values[g.mask], 3.0)
        G = gradient_vectors(lattice_small, f)
        inner = g.mask
        assert np.allclose(G[inner], [1.0, 2.0, -2.0])
        assert np.allclose(gradient_norm_lsq(lattice_small, f).values[inner], 3.0)

    def test_energy_of_coordinate(self):
        L = build_lattice(3, 4, 0.5)
        # sum over x-edges of w (dx)^2 = (#x-edges) h^{N-2} h^2
        assert dirichlet_energy(L, L.positions[:, 0]) == pytest.approx(16 * 17 * 17 * 0.5 * 0.25)

    def test_volume_growth(self, lattice_small):
        c = nearest_vertex(lattice_small, np.zeros(3))
        prof = bishop_gromov_profile(lattice_small, c, [1.0, 2.0])
        assert np.all(prof.ratios > 0)
        assert avr_estimate(lattice_small, c) == pytest.approx(4.12, rel=0.05)
        assert ball_mass(lattice_small, c, 1.0) > 0


class TestMatchedBall:
    @pytest.mark.parametrize("side", ["inner", "outer"])
    def test_layer_mean_distance(self, side):
        L = build_lattice(3, 6, 0.25)
        idx = matched_ball(L, np.zeros(3), 3.0, side)
        inside = np.zeros(L.n, bool)
        inside[idx] = True
        A = L.adjacency.astype(bool)
        if side == "inner":
            layer = inside & (A @ (~inside).astype(np.int8) > 0)
        else:
            layer = ~inside & (A @ inside.astype(np.int8) > 0)
        d = np.linalg.norm(L.positions[layer], axis=1)
        assert abs(d.mean() - 3.0) < 0.05


class TestCylinderAndCone:
    def test_cylinder_measure(self):
        C = build_cylinder(2 * math.pi, 10, 0.25)
        assert C.total_measure == pytest.approx(2 * math.pi * 10, rel=0.03)
        assert C.N == 2

    @pytest.mark.parametrize("section,mass", [({"circleAngle": math.pi}, math.pi),
                                              ({"sphereRadiusFactor": 0.8}, 4 * math.pi * 0.64)])
    def test_annulus_measure(self, section, mass):
        N = 2 if "circleAngle" in section else 3
        C = build_cone(N, section, 0.5, 4.0, 30)
        t = np.linalg.norm(C.positions, axis=1)
        assert C.total_measure == pytest.approx(mass * (4.0 ** N - 0.5 ** N) / N, rel=1e-9)
        assert C.cross_section_mass == pytest.approx(mass)
        assert cone_mesh_layout(C)[1] * 30 == C.n
        assert np.all(t >= 0.5 - 1e-12)

    def test_cross_section_diameter_limit(self):
        with pytest.raises(PreconditionError):
            build_cone(3, {"sphereRadiusFactor": 1.2}, 0.5, 4.0, 10)
        with pytest.raises(PreconditionError):
            build_cone(2, {"circleAngle": 7.0}, 0.5, 4.0, 10)

    def test_cone_gradient_exact_on_radial(self, cone_mesh):
        t = np.linalg.norm(cone_mesh.positions, axis=1)
        G = gradient_vectors(cone_mesh, t ** 2)
        expected = 2 * cone_mesh.positions
        inner = (t > 0.6) & (t < 7.5)
        assert np.max(np.abs(G[inner] - expected[inner])) < 1e-9

    def test_radial_space(self):
        R = build_radial(3, 1, 10)
        assert R.total_measure == pytest.approx(4 * math.pi * (1000 - 1) / 3)
        with pytest.raises(PreconditionError):
            build_radial(3, 2, 1)


class TestSpaceValidation:
    def test_disconnected(self):
        with pytest.raises(PreconditionError, match="disconnected"):
            Space("graph", 1, measure=np.ones(4), edges=[[0, 1], [2, 3]], weight=[1, 1], length=[1, 1])

    def test_nonpositive(self):
        with pytest.raises(PreconditionError):
            Space("graph", 1, measure=np.array([1.0, 0.0]), edges=[[0, 1]], weight=[1], length=[1])

    def test_leaves_are_boundary(self):
        S = Space("graph", 1, measure=np.ones(3), edges=[[0, 1], [1, 2]], weight=[1, 1], length=[1, 1])
        assert S.boundary.tolist() == [True, False, True]


class TestBumps:
    def test_amplitude(self, lattice_small):
        B = bump_density(lattice_small, 0.1, [(0, 0, 0)], 1.0)
        ratio = B.measure / lattice_small.measure
        assert ratio.max() == pytest.approx(1.1, abs=1e-12)
        assert ratio.min() >= 1.0
        assert np.all(B.weight >= lattice_small.weight)


class TestInvariants:
    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_green_identity(self, seed):
        rng = np.random.default_rng(seed)
        L = build_lattice(2, 2, 0.5)
        L = bump_density(L, 0.3, [(rng.uniform(-1, 1), rng.uniform(-1, 1))], 0.7)
        interior = np.linalg.norm(L.positions, axis=1) < 1.0
        f = np.where(interior, rng.normal(size=L.n), 0.0)
        g = np.where(interior, rng.normal(size=L.n), 0.0)
        lap = laplacian(L, g)
        assert np.all(f[~lap.mask] == 0)
        lhs = np.sum((L.measure * f * lap.values)[lap.mask])
        a, b = L.edges[:, 0], L.edges[:, 1]
        rhs = -np.sum(L.weight * (f[a] - f[b]) * (g[a] - g[b]))
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-12)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_energy_nonnegative_and_zero_on_constants(self, seed):
        rng = np.random.default_rng(seed)
        L = build_lattice(2, 1, 0.5)
        assert dirichlet_energy(L, rng.normal(size=L.n)) > 0
        assert dirichlet_energy(L, np.full(L.n, rng.normal())) == 0

    def test_graph_distance_is_a_metric(self):
        C = build_cylinder(2 * math.pi, 6, 0.5)
        rng = np.random.default_rng(0)
        idx = rng.choice(C.n, 12, replace=False)
        D = np.array([C.distances_from(int(i))[idx] for i in idx])
        assert np.allclose(D, D.T)
        assert np.all(np.diag(D) == 0)
        assert np.all(D[:, :, None] <= D[:, None, :] + D.T[None, :, :] + 1e-12)

    def test_cone_distance_triangle_on_mesh(self, cone_mesh):
        rng = np.random.default_rng(1)
        P = cone_mesh.positions[rng.choice(cone_mesh.n, (500, 3))]
        dxy = cone_mesh.point_distance(P[:, 0], P[:, 1])
        dyz = cone_mesh.point_distance(P[:, 1], P[:, 2])
        dxz = cone_mesh.point_distance(P[:, 0], P[:, 2])
        assert np.all(dxz <= dxy + dyz + 1e-9)
        assert np.array_equal(dxy, cone_mesh.point_distance(P[:, 1], P[:, 0]))

    def test_quadratic_laplacian_two_dimensions(self):
        L = build_lattice(2, 3, 0.5)
        x, y = L.positions.T
        lap = laplacian(L, 3 * x * x - y * y + x * y + 2 * x)
        assert np.allclose(lap.values[lap.mask], 4.0)
