import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from monocap.cone import (cone_potential, cosine_check, cross_section, dd_prime_check, extension_radius, kato_check,
                          kato_search, kato_sharp_family, mesh_tolerance, rigidity_residual)
from monocap.errors import PreconditionError
from monocap.mmspace import RadialField, ScalarField, build_lattice, build_radial
from monocap.potential import ExteriorProblemSpec, solve_exterior


class TestKato:
    def test_identity_example(self):
        out = kato_check(np.eye(2), [1.0, 0.0], 1.0)
        assert out["lhs"] == pytest.approx(1.5) and out["rhs"] == pytest.approx(6.0) and out["holds"]

    def test_zero_matrix(self):
        out = kato_check(np.zeros((3, 3)), [1.0, 2.0, 3.0], 0.5)
        assert out["lhs"] == 0 and out["holds"]

    def test_rejects(self):
        with pytest.raises(PreconditionError):
            kato_check(np.eye(2), [1, 0], 0.0)
        with pytest.warns(UserWarning, match="symmetrized"):
            kato_check([[1, 2], [0, 1]], [1, 0], 1.0)

    @given(st.integers(2, 6).flatmap(lambda n: st.tuples(
        arrays(float, (n, n), elements=st.floats(-10, 10)), arrays(float, n, elements=st.floats(-10, 10)))),
        st.floats(0.01, 100))
    @settings(max_examples=300, deadline=None)
    def test_property(self, Av, t):
        A, v = Av
        with np.errstate(all="ignore"):
            assert kato_check(0.5 * (A + A.T), v, t)["holds"]

    def test_sharp_family_is_nearly_tight(self):
        rng = np.random.default_rng(1)
        for n in (2, 4, 6):
            A, v = kato_sharp_family(n, 1.0, 50, rng, noise=0.0)
            for Ak, vk in zip(A, v):
                out = kato_check(Ak, vk, 1.0)
                assert out["rhs"] / out["lhs"] == pytest.approx(1.0, abs=1e-9)

    def test_search(self):
        out = kato_search(range(2, 5), 3000, seed=3)
        assert out["trials"] == 3000
        assert out["violations"] == 0 and out["worstRatio"] >= 1
        assert out["sharpWorstRatio"] < 1 + 1e-3


class TestRigidityRadial:
    def test_exact_monopole(self):
        u = solve_exterior(ExteriorProblemSpec(build_radial(3, 1.0, 100.0)), far_field="monopole")
        res = rigidity_residual(u, 3)
        assert res.is_cone() and res.worst < 1e-12

    def test_truncated_is_not_a_cone(self):
        u = solve_exterior(ExteriorProblemSpec(build_radial(3, 1.0, 100.0), r_out=10.0))
        assert not rigidity_residual(u, 3).is_cone()

    @given(st.floats(0.1, 10), st.sampled_from([3, 4, 6]))
    @settings(max_examples=30, deadline=None)
    def test_cone_potential_closed_form(self, b, N):
        sp = build_radial(N, 0.5, 50.0)
        bold = cone_potential(RadialField(sp, 0.0, b, 2 - N), N)
        r = np.array([0.7, 2.0, 9.0])
        assert bold(r) == pytest.approx(r ** 2 / 2, rel=1e-12)

    def test_cone_potential_needs_power(self):
        sp = build_radial(3, 1.0, 10.0)
        with pytest.raises(PreconditionError):
            cone_potential(RadialField(sp, 0.1, 1.0, -1.0), 3)


class TestRigidityMesh:
    def test_cone_mesh_is_cone(self, cone_mesh_potential):
        _, _, rig = cone_mesh_potential
        assert rig.is_cone()
        assert rig.normalization > 0

    def test_tolerance_scales_with_spacing(self):
        coarse, fine = build_lattice(3, 4, 0.5), build_lattice(3, 4, 0.25)
        sel = lambda L: np.linalg.norm(L.positions, axis=1) > 2
        assert mesh_tolerance(coarse, sel(coarse)) == pytest.approx(4 * mesh_tolerance(fine, sel(fine)), rel=0.2)

    def test_candidate_override(self, cone_field, cone_mesh_potential):
        bold, region, rig = cone_mesh_potential
        wrong = rigidity_residual(cone_field, 3, region, bold_u=1.3 * bold.values)
        assert wrong.worst > 10 * rig.tolerance


class TestCosine:
    def test_exact(self):
        rng = np.random.default_rng(0)
        bold = RadialField(build_radial(3, 0.01, 100.0), 0.0, 0.5, 2.0)
        P = rng.normal(size=(200, 3)) * 2
        Q = P + rng.normal(size=(200, 3)) * 0.3
        out = cosine_check(bold, 0.5, list(zip(P, Q)), locality=1.5)
        assert out["maxResidual"] < 1e-10

    def test_wrong_level_scaling_fails(self):
        rng = np.random.default_rng(2)
        bold = RadialField(build_radial(3, 0.01, 100.0), 0.0, 0.7, 2.0)
        P = rng.normal(size=(50, 3)) * 2
        Q = P + rng.normal(size=(50, 3)) * 0.5
        assert cosine_check(bold, 0.5, list(zip(P, Q)), locality=2.0)["maxResidual"] > 1e-3


class TestCrossSection:
    def test_extension_radius(self):
        assert extension_radius(1.0, 0.0) == 1.0
        assert extension_radius(2.0, math.pi / 3) == pytest.approx(4.0)
        with pytest.raises(PreconditionError):
            extension_radius(1.0, math.pi)

    def test_lattice_sphere(self, ball_field):
        rig = rigidity_residual(ball_field, 3, ball_field.mask & (ball_field.values > 0.25) & (ball_field.values < 0.4))
        bold = cone_potential(ball_field, 3, rig.normalization)
        s = cross_section(bold, 12.5, 150)
        assert s.connected
        out = dd_prime_check(s)
        assert out["holds"]
        P = ball_field.space.positions[s.pairs[:, 0]]
        Q = ball_field.space.positions[s.pairs[:, 1]]
        cosang = np.sum(P * Q, 1) / np.linalg.norm(P, axis=1) / np.linalg.norm(Q, axis=1)
        ratio = s.rescaled / np.arccos(np.clip(cosang, -1, 1))
        assert np.median(ratio) == pytest.approx(1.0, abs=0.05)
