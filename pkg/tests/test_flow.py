import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monocap.errors import PreconditionError
from monocap.flow import (FieldInterpolant, annulus_measure, cell_intervals, disintegration_histogram,
                          integrate_flow, measure_pushforward_check, project_points, projection)
from monocap.mmspace import RadialField, build_radial

point = st.tuples(*[st.floats(-4, 4)] * 3).map(np.array).filter(lambda x: 0.2 < np.linalg.norm(x) < 4)


@pytest.fixture(scope="module")
def cone_potential_radial():
    return RadialField(build_radial(3, 0.01, 100.0), 0.0, 0.5, 2.0)


class TestRadialFlow:
    @given(point, st.floats(0.05, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_value_law(self, x, t):
        u = RadialField(build_radial(3, 0.01, 100.0), 0.0, 0.5, 2.0)
        tr = integrate_flow(u.space, u, x, t)
        assert float(u(np.linalg.norm(tr.end))) * math.exp(2 * t) == pytest.approx(float(u(np.linalg.norm(x))),
                                                                                    abs=1e-7)
        # the flow moves along the ray towards the tip
        assert np.allclose(tr.end / np.linalg.norm(tr.end), x / np.linalg.norm(x), atol=1e-9)

    def test_distance_law_and_group(self, cone_potential_radial):
        u = cone_potential_radial
        x = np.array([1.0, -2.0, 0.5])
        ts = [0.0, 0.25, 0.5, 1.0]
        tr = integrate_flow(u.space, u, x, 1.0, t_eval=ts)
        ux = float(u(np.linalg.norm(x)))
        for s in ts:
            for t in ts:
                d = np.linalg.norm(tr.samples[s] - tr.samples[t])
                assert d == pytest.approx(abs(math.exp(-t) - math.exp(-s)) * math.sqrt(2 * ux), abs=1e-7)
        a = integrate_flow(u.space, u, x, 0.3)
        b = integrate_flow(u.space, u, a.end, 0.7)
        assert np.linalg.norm(b.end - tr.end) < 1e-7

    def test_backward_flow(self, cone_potential_radial):
        u = cone_potential_radial
        x = np.array([0.0, 1.0, 0.0])
        tr = integrate_flow(u.space, u, x, -0.5)
        assert np.linalg.norm(tr.end) == pytest.approx(math.exp(0.5), rel=1e-7)

    def test_exit_time(self, cone_potential_radial):
        u = cone_potential_radial
        tr = integrate_flow(u.space, u, np.array([0.05, 0.0, 0.0]), 5.0)
        assert tr.exited
        assert tr.exit_time == pytest.approx(math.log(5.0), rel=1e-6)

    def test_band_exit(self, cone_potential_radial):
        u = cone_potential_radial
        tr = integrate_flow(u.space, u, np.array([2.0, 0.0, 0.0]), 2.0, band=(0.5, 3.0))
        assert tr.exited and tr.exit_time == pytest.approx(0.5 * math.log(2.0 / 0.5), rel=1e-6)
        with pytest.raises(PreconditionError):
            integrate_flow(u.space, u, np.array([3.0, 0.0, 0.0]), 1.0, band=(0.5, 3.0))

    def test_projection(self, cone_potential_radial):
        u = cone_potential_radial
        x = np.array([3.0, 4.0, 0.0])
        pr = projection(u.space, u, 0.5, x)
        assert np.allclose(pr.point, x / 5.0, atol=1e-7)
        assert pr.flow_time == pytest.approx(math.log(5.0), rel=1e-7)
        with pytest.raises(PreconditionError):
            projection(u.space, u, 0.0, x)

    def test_measure_laws(self, cone_potential_radial):
        u = cone_potential_radial
        out = measure_pushforward_check(u.space, u, 0.3, (0.5, 8.0))
        assert out["relativeError"] < 1e-12
        assert disintegration_histogram(u.space, u, (0.5, 8.0))["ksDistance"] < 1e-3
        m, _ = annulus_measure(u.space, u, 0.5, 2.0)
        assert m == pytest.approx(4 * math.pi * (8 - 1) / 3)


class TestMeshFlow:
    def test_value_law(self, cone_mesh, cone_mesh_potential):
        bold, _, _ = cone_mesh_potential
        x = np.array([3.0, 0.5, 1.0])
        u0 = FieldInterpolant(bold).value(x)
        tr = integrate_flow(cone_mesh, bold, x, 0.5)
        assert not tr.exited
        assert FieldInterpolant(bold).value(tr.end) * math.exp(1.0) == pytest.approx(u0, rel=0.02)

    def test_batched_projection(self, cone_mesh, cone_mesh_potential):
        bold, region, _ = cone_mesh_potential
        idx = np.flatnonzero(region)[::500]
        Y = project_points(cone_mesh, bold, 1.0, cone_mesh.positions[idx], values=bold.values[idx])
        interp = FieldInterpolant(bold)
        assert np.max(np.abs(interp.values(Y) - 1.0)) < 1e-6
        # projections stay on the rays through the tip
        P = cone_mesh.positions[idx]
        cos = np.sum(P * Y, 1) / np.linalg.norm(P, axis=1) / np.linalg.norm(Y, axis=1)
        assert np.min(cos) > 1 - 1e-3

    def test_cell_intervals_contain_vertex_values(self, cone_mesh_potential):
        bold = cone_mesh_potential[0]
        lo, hi = cell_intervals(bold)
        m = bold.mask
        assert np.all(lo[m] <= bold.values[m]) and np.all(bold.values[m] <= hi[m])

    def test_quadratures(self, cone_mesh, cone_mesh_potential):
        bold = cone_mesh_potential[0]
        cell = measure_pushforward_check(cone_mesh, bold, 0.3, (1.0, 20.0))
        vertex = measure_pushforward_check(cone_mesh, bold, 0.3, (1.0, 20.0), quadrature="vertex")
        assert cell["relativeError"] < 0.01
        assert cell["relativeError"] < vertex["relativeError"]
        with pytest.raises(PreconditionError):
            measure_pushforward_check(cone_mesh, bold, 2.0, (1.0, 20.0))


class TestInvariants:
    @given(st.floats(0.6, 2.9), st.floats(0.3, 0.55), st.floats(3.0, 6.0))
    @settings(max_examples=25, deadline=None)
    def test_exit_window_both_ends(self, u0, lo, hi):
        u = RadialField(build_radial(3, 0.01, 100.0), 0.0, 0.5, 2.0)
        x = np.array([math.sqrt(2 * u0), 0.0, 0.0])
        down = integrate_flow(u.space, u, x, 10.0, band=(lo, hi))
        up = integrate_flow(u.space, u, x, -10.0, band=(lo, hi))
        assert down.exited and up.exited
        assert down.exit_time == pytest.approx(0.5 * math.log(u0 / lo), rel=1e-6)
        assert up.exit_time == pytest.approx(0.5 * math.log(u0 / hi), rel=1e-6)

    def test_radial_paths_are_geodesics(self, cone_potential_radial):
        u = cone_potential_radial
        tr = integrate_flow(u.space, u, np.array([1.0, 2.0, 0.5]), 0.7)
        r0, r1 = np.linalg.norm(tr.start), np.linalg.norm(tr.end)
        assert tr.path_length(u.space) == pytest.approx(r0 - r1, rel=1e-9)

    def test_mesh_paths_are_geodesics(self, cone_mesh, cone_mesh_potential):
        bold, _, _ = cone_mesh_potential
        rng = np.random.default_rng(3)
        t = np.linalg.norm(cone_mesh.positions, axis=1)
        starts = rng.choice(np.flatnonzero((t > 2.5) & (t < 3.5)), 5, replace=False)
        for s in starts:
            tr = integrate_flow(cone_mesh, bold, cone_mesh.positions[s], 0.3)
            chord = float(cone_mesh.point_distance(tr.start, tr.end))
            assert tr.path_length(cone_mesh) == pytest.approx(chord, rel=2e-3)
