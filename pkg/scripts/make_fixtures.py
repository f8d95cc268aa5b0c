"""Regenerate the packaged fixtures: the synthetic shoal raster and a pilot
survey data set simulated from the shoal cover model.

Run from the repo root:  python3 scripts/make_fixtures.py
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from scipy.special import expit

from gamdesign.geo import (
    TransectParams,
    snap_to_fishnet,
    synthetic_shoal,
    transects_to_design,
    write_raster,
)
from gamdesign.rng import rng_for

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "gamdesign" / "fixtures"

# pilot-generating parameters: intercept/slope on normalized depth, spline
# wiggliness, fishnet effect scale, binomial trials
BETA0, BETA1 = -6.0, 5.0
SIGMA_U, PHI1_SD = 1.5, 0.2
TRIALS = 20
PILOT_TRANSECTS = 12
N_POINTS = 50
SEED = 20260824


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    raster = synthetic_shoal()
    write_raster(raster, FIXTURES / "shoal.grid")

    rng = rng_for(SEED)
    e_lo, e_hi, n_lo, n_hi = raster.extent
    transects = []
    while len(transects) < PILOT_TRANSECTS:
        e0, n0 = snap_to_fishnet(
            rng.uniform(e_lo + 600, e_hi - 600),
            rng.uniform(n_lo + 600, n_hi - 600),
            raster.origin_e,
            raster.origin_n,
            500.0,
        )
        t = TransectParams(e0=e0, n0=n0, omega=float(rng.uniform(0, 2 * np.pi)), l_t=500.0)
        try:
            transects_to_design(raster, [t], n_points=N_POINTS)
        except Exception:
            continue
        transects.append(t)

    design = transects_to_design(raster, transects, n_points=N_POINTS)
    depth = design.covariates["depth"]
    xn = (depth - (-60.0)) / (-18.0 - (-60.0))

    # smooth wiggle on the normalized depth plus a fishnet effect
    wiggle = SIGMA_U * np.sin(3.2 * np.pi * xn) * 0.15
    cells = design.groups["cell"]
    cell_levels = np.unique(cells)
    cell_fx = dict(zip(cell_levels, PHI1_SD * rng.standard_normal(cell_levels.size)))
    eta = BETA0 + BETA1 * xn + wiggle + np.array([cell_fx[c] for c in cells])
    y = rng.binomial(TRIALS, expit(eta))

    with open(FIXTURES / "pilot_shoal.csv", "w", encoding="ascii", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["depth", "easting", "northing", "cell", "y"])
        for i in range(design.n):
            writer.writerow(
                [
                    repr(float(depth[i])),
                    repr(float(design.coords[i, 0])),
                    repr(float(design.coords[i, 1])),
                    int(cells[i]),
                    int(y[i]),
                ]
            )
    print(f"wrote {FIXTURES / 'shoal.grid'} and {FIXTURES / 'pilot_shoal.csv'}")


if __name__ == "__main__":
    main()
