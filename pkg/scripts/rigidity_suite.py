"""Rigidity residuals on exact cones versus lattices with bumped measures."""
import argparse
import csv
from dataclasses import dataclass

import numpy as np

from monocap.cone import rigidity_residual
from monocap.mmspace import build_cone, build_lattice, bump_density, matched_ball
from monocap.potential import ExteriorProblemSpec, solve_exterior

BUMPS = [([(6, 0, 0)], 0.75), ([(0, 6, 0)], 1.0), ([(4, 4, 0)], 0.75), ([(0, 0, -6)], 1.0),
         ([(6, 0, 0), (-3, -3, 4)], 1.0), ([(3.5, -3.5, 3.5)], 0.75)]


@dataclass
class RigidityConfig:
    extent: float = 12.0
    spacing: float = 0.25
    amplitude: float = 0.1
    band_lo: float = 0.25
    band_hi: float = 0.4
    out: str = "rigidity_suite.csv"


def lattice_case(space, cfg: RigidityConfig):
    u = solve_exterior(ExteriorProblemSpec(space, matched_ball(space, np.zeros(3), 2.0), r_out=cfg.extent - 0.5),
                       far_field="monopole")
    return rigidity_residual(u, 3, u.mask & (u.values > cfg.band_lo) & (u.values < cfg.band_hi))


def cone_case():
    sp = build_cone(3, {"sphereRadiusFactor": 0.8}, 0.5, 8.0, 40)
    r = np.linalg.norm(sp.positions, axis=1)
    u = solve_exterior(ExteriorProblemSpec(sp, np.flatnonzero(r <= 1.0 + 1e-9)), far_field="monopole")
    return rigidity_residual(u, 3, u.mask & (u.values > 0.15) & (u.values < 0.8))


def run(cfg: RigidityConfig):
    base = build_lattice(3, cfg.extent, cfg.spacing)
    cases = [("exact", "cone mesh", cone_case()), ("exact", "lattice", lattice_case(base, cfg))]
    for centers, sigma in BUMPS:
        cases.append(("perturbed", f"bump {centers} sigma {sigma}",
                      lattice_case(bump_density(base, cfg.amplitude, centers, sigma), cfg)))
    with open(cfg.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "space", "laplacian_sup", "eikonal_sup", "tolerance", "ratio"])
        for kind, name, res in cases:
            ratio = res.worst / res.tolerance
            print(f"{kind:9s} {name:40s} ratio {ratio:6.2f}")
            w.writerow([kind, name, res.laplacian_sup, res.eikonal_sup, res.tolerance, ratio])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--amplitude", type=float, default=RigidityConfig.amplitude)
    ap.add_argument("--out", default=RigidityConfig.out)
    args = ap.parse_args()
    run(RigidityConfig(amplitude=args.amplitude, out=args.out))
