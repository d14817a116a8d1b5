import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monocap.errors import PreconditionError
from monocap.mmspace import Space, build_lattice, build_radial, matched_ball, nearest_vertex
from monocap.potential import (ExteriorProblemSpec, cap_fat_ratio, coloring, comparison_check, exterior_richardson,
                               lift_check, prop_lower_bound_ratio, solve_exterior, solve_obstacle,
                               solve_obstacle_active_set, wiener_decay_fit)

from oracles import truncated_ball_capacity


def path_graph(n, weights=None):
    w = np.ones(n - 1) if weights is None else np.asarray(weights, float)
    return Space("graph", 1, measure=np.ones(n), edges=np.array([[i, i + 1] for i in range(n - 1)]),
                 weight=w, length=np.ones(n - 1))


class TestPathGraph:
    def test_capacity_two(self):
        s = path_graph(3)
        res = solve_obstacle(s, [1], [0, 1, 2])
        assert res.capacity == 2.0
        assert res.potential.values.tolist() == [0.0, 1.0, 0.0]

    @given(st.lists(st.floats(0.1, 10), min_size=2, max_size=8), st.data())
    @settings(max_examples=40, deadline=None)
    def test_series_conductance(self, weights, data):
        # E = one interior vertex; both leaves are grounded, so the two sides add in parallel
        n = len(weights) + 1
        k = data.draw(st.integers(1, n - 2))
        s = path_graph(n, weights)
        expected = 1 / sum(1 / w for w in weights[:k]) + 1 / sum(1 / w for w in weights[k:])
        res = solve_obstacle(s, [k], list(range(n)))
        assert res.capacity == pytest.approx(expected, rel=1e-6)
        act = solve_obstacle_active_set(s, [k], list(range(n)))
        assert act.capacity == pytest.approx(expected, rel=1e-9)

    def test_potential_bounds(self):
        s = path_graph(6, [1, 2, 3, 4, 5])
        u = solve_obstacle(s, [2], list(range(6))).potential.values
        assert np.all((u >= 0) & (u <= 1))
        assert np.all(np.diff(u[2:]) <= 0) and np.all(np.diff(u[:3]) >= 0)


class TestObstacle:
    @pytest.fixture(scope="class")
    @staticmethod
    def small():
        L = build_lattice(3, 4, 0.5)
        c = nearest_vertex(L, np.zeros(3))
        E, B = matched_ball(L, c, 1.0), matched_ball(L, c, 3.5, "outer")
        return L, c, E, B, solve_obstacle(L, E, B)

    def test_psor_matches_active_set(self, small):
        L, c, E, B, res = small
        act = solve_obstacle_active_set(L, E, B)
        assert act.capacity == pytest.approx(res.capacity, rel=1e-6)
        assert np.max(np.abs(act.potential.values - res.potential.values)) < 1e-5

    def test_capacity_near_continuum(self, small):
        L, c, E, B, res = small
        assert res.capacity == pytest.approx(truncated_ball_capacity(1.0, 3.5), rel=0.2)

    def test_comparison_and_lift(self, small):
        L, c, E, B, res = small
        assert comparison_check(res, np.ones(L.n))["holds"]
        assert comparison_check(res, res.potential.values)["holds"]
        assert lift_check(res, 0.5)["agrees"]

    def test_comparison_rejects_bad_competitors(self, small):
        L, c, E, B, res = small
        with pytest.raises(PreconditionError):
            comparison_check(res, 0.5 * np.ones(L.n))
        bump = np.ones(L.n)
        bump[E] = 2.0
        bump[c] = 1.0  # a dip at the centre is not superharmonic
        with pytest.raises(PreconditionError):
            comparison_check(res, bump)

    def test_coloring_is_proper(self, small):
        L = small[0]
        colors = coloring(L.adjacency)
        assert len(colors) == 2
        lab = np.empty(L.n, int)
        for k, idx in enumerate(colors):
            lab[idx] = k
        assert np.all(lab[L.edges[:, 0]] != lab[L.edges[:, 1]])

    def test_cap_fat_and_prop_bound(self, small):
        L, c, E, B, res = small
        ratios = cap_fat_ratio(L, E, int(E[0]), [0.5])
        assert all(r > 0 for r in ratios)
        assert prop_lower_bound_ratio(L, E, c, 1.0)

    def test_errors(self):
        s = path_graph(3)
        with pytest.raises(PreconditionError):
            solve_obstacle(s, [1], [1])
        with pytest.raises(PreconditionError):
            solve_obstacle(s, [0, 1, 2], [0, 1, 2])


class TestRadial:
    def test_capacity(self):
        R = build_radial(3, 1.0, 8.0)
        assert solve_obstacle(R, 1.0, 8.0).capacity == pytest.approx(4 * math.pi * 8 / 7, rel=1e-12)

    def test_exterior_forms(self):
        R = build_radial(3, 2.0, 50.0)
        u = solve_exterior(ExteriorProblemSpec(R), far_field="monopole")
        assert float(u(4.0)) == pytest.approx(0.5)
        v = solve_exterior(ExteriorProblemSpec(R, r_out=4.0))
        assert float(v(2.0)) == pytest.approx(1.0) and float(v(4.0)) == pytest.approx(0.0, abs=1e-15)

    def test_radial_lift(self):
        R = build_radial(3, 1.0, 8.0)
        assert lift_check(solve_obstacle(R, 1.0, 8.0), 0.5, 1e-7)["agrees"]

    def test_two_dimensional_refused(self):
        with pytest.raises(PreconditionError):
            solve_exterior(ExteriorProblemSpec(build_radial(2, 1.0, 5.0)), far_field="monopole")


class TestExterior:
    def test_tight_truncation_warns(self):
        L = build_lattice(3, 3, 0.5)
        c = nearest_vertex(L, np.zeros(3))
        with pytest.warns(UserWarning, match="truncation tight"):
            u = solve_exterior(ExteriorProblemSpec(L, matched_ball(L, c, 1.5), 2.5, c))
        assert u.meta["truncation_tight"]

    def test_harmonic_in_free_region(self, lattice_small):
        L = lattice_small
        c = nearest_vertex(L, np.zeros(3))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            u = solve_exterior(ExteriorProblemSpec(L, matched_ball(L, c, 1.0), 3.5, c))
        assert u.meta["residual"] < 1e-8
        assert np.all(u.values >= -1e-12) and np.all(u.values <= 1 + 1e-12)

    def test_richardson_improves_far_field(self):
        L = build_lattice(3, 8, 0.5)
        c = nearest_vertex(L, np.zeros(3))
        E = matched_ball(L, c, 1.0)
        d = np.linalg.norm(L.positions, axis=1)
        on_two = np.abs(d - 2.0) < 1e-9
        rich = exterior_richardson(L, E, radii=(4.0, 6.0, 8.0), center=c)
        single = solve_exterior(ExteriorProblemSpec(L, E, 8.0, c))
        # truncated solutions increase with the truncation radius, so the limit lies above them
        assert np.all(rich.values[on_two] > single.values[on_two])
        assert np.max(np.abs(rich.values[on_two] - 0.5)) < 0.05

    def test_validation(self, lattice_small):
        L = lattice_small
        c = nearest_vertex(L, np.zeros(3))
        with pytest.raises(PreconditionError):
            solve_exterior(ExteriorProblemSpec(L, [], 3.0, c))
        with pytest.raises(PreconditionError):
            solve_exterior(ExteriorProblemSpec(L, matched_ball(L, c, 1.0), 1.0, c))
        with pytest.raises(PreconditionError):
            solve_exterior(ExteriorProblemSpec(L, matched_ball(L, c, 1.0), 3.0, c), far_field="dipole")


def test_wiener_needs_levels(lattice_small):
    L = lattice_small
    c = nearest_vertex(L, np.zeros(3))
    res = solve_obstacle(L, matched_ball(L, c, 1.0), matched_ball(L, c, 3.5, "outer"))
    x = int(matched_ball(L, c, 1.0)[0])
    with pytest.raises(PreconditionError):
        wiener_decay_fit(res, x, (1.0, 0.5))


class TestInvariants:
    @pytest.fixture(scope="class")
    @staticmethod
    def lattice():
        L = build_lattice(3, 4, 0.5)
        return L, nearest_vertex(L, np.zeros(3))

    def test_uniqueness_from_different_starts(self, lattice):
        L, c = lattice
        E, B = matched_ball(L, c, 1.0), matched_ball(L, c, 3.5, "outer")
        a = solve_obstacle(L, E, B)
        b = solve_obstacle(L, E, B, init=np.random.default_rng(0).random(L.n))
        assert np.max(np.abs(a.potential.values - b.potential.values)) <= 10 * a.tol

    def test_capacity_monotone_in_sets(self, lattice):
        L, c = lattice
        B = matched_ball(L, c, 3.5, "outer")
        caps_E = [solve_obstacle(L, matched_ball(L, c, r), B).capacity for r in (0.75, 1.0, 1.5)]
        assert all(a <= b + 1e-8 for a, b in zip(caps_E, caps_E[1:]))
        E = matched_ball(L, c, 1.0)
        caps_B = [solve_obstacle(L, E, matched_ball(L, c, r, "outer")).capacity for r in (2.5, 3.0, 3.5)]
        assert all(a + 1e-8 >= b for a, b in zip(caps_B, caps_B[1:]))

    def test_maximum_principle(self, lattice):
        L, c = lattice
        E = matched_ball(L, c, 1.0)
        field = solve_exterior(ExteriorProblemSpec(L, E, 3.5, c))
        u = field.values
        free = field.mask.copy()
        free[E] = False
        assert np.all(u[free] > 0) and np.all(u[free] < 1)
        res = solve_obstacle(L, E, matched_ball(L, c, 3.5, "outer"))
        assert res.potential.values.min() >= 0 and res.potential.values.max() <= 1

    def test_prop_lower_bound_constant(self, lattice):
        L, c = lattice
        ratios = []
        for E_r, r in ((0.5, 1.5), (1.0, 1.5), (1.0, 2.0)):
            out = prop_lower_bound_ratio(L, matched_ball(L, c, E_r), c, r)
            ratios.append(out["min_u"] / out["ratio"])
        # one positive constant serves every example
        assert min(ratios) > 0
