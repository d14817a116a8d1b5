import numpy as np
import pytest

from monocap.mmspace import build_cone, build_lattice, build_radial, matched_ball, nearest_vertex
from monocap.potential import ExteriorProblemSpec, solve_exterior


@pytest.fixture(scope="session")
def lattice_small():
    return build_lattice(3, 4, 0.5)


@pytest.fixture(scope="session")
def lattice_fine():
    """The R^3 patch used for monotonicity and decay checks."""
    return build_lattice(3, 12, 0.25)


@pytest.fixture(scope="session")
def ball_field(lattice_fine):
    """Exterior potential of a ball of radius 2 with a monopole far field at radius 11.5."""
    L = lattice_fine
    c = nearest_vertex(L, np.zeros(3))
    E = matched_ball(L, c, 2.0)
    return solve_exterior(ExteriorProblemSpec(L, E, 11.5, c), far_field="monopole")


@pytest.fixture(scope="session")
def ellipsoid_field(lattice_fine):
    L = lattice_fine
    P = L.positions
    E = np.flatnonzero((P[:, 0] / 3) ** 2 + (P[:, 1] / 1.5) ** 2 + (P[:, 2] / 1.5) ** 2 <= 1)
    c = nearest_vertex(L, np.zeros(3))
    return solve_exterior(ExteriorProblemSpec(L, E, 11.5, c), far_field="monopole")


@pytest.fixture(scope="session")
def radial3():
    return build_radial(3, 1.0, 100.0)


@pytest.fixture(scope="session")
def cone_mesh():
    return build_cone(3, {"sphereRadiusFactor": 0.8}, 0.5, 8.0, 40)


@pytest.fixture(scope="session")
def cone_field(cone_mesh):
    r = np.linalg.norm(cone_mesh.positions, axis=1)
    return solve_exterior(ExteriorProblemSpec(cone_mesh, np.flatnonzero(r <= 1.0 + 1e-9)), far_field="monopole")


@pytest.fixture(scope="session")
def cone_mesh_potential(cone_field):
    from monocap.cone import cone_potential, rigidity_residual
    u = cone_field
    region = u.mask & (u.values > 0.15) & (u.values < 0.8)
    rig = rigidity_residual(u, 3, region)
    return cone_potential(u, 3, rig.normalization), region, rig


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} {detail}")
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
