"""Forward propagation of a two-class platoon: fluid mean and diffusion std per cell.

    python3 scripts/forward_propagation.py --out results/forward
"""

import argparse
from pathlib import Path

import numpy as np

from stochctm.cli import field_rows, write_table
from stochctm.diffusion import solve_covariance_rho
from stochctm.fluid import solve_fluid
from stochctm.scenarios import preset


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/forward"))
    ap.add_argument("--snapshot-dt", type=float, default=10.0, help="seconds")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    sc = preset("forward-propagation")
    cfg = sc.config
    dt = args.snapshot_dt / 3600.0
    fluid = solve_fluid(cfg, sc.run.horizon_h, dt)
    approx = solve_covariance_rho(cfg, fluid, store_full=False)
    write_table(args.out / "fluid_mean.csv", field_rows(cfg, fluid.times, fluid.rho, "veh/km"))
    write_table(args.out / "diffusion_std.csv", field_rows(cfg, fluid.times, approx.std, "veh/km"))

    tot = fluid.rho.reshape(-1, cfg.d, cfg.m)
    for t_s in (0, 500, 1000, 1500, 2000):
        k = fluid.at(t_s / 3600.0)
        front = [int(np.flatnonzero(tot[k, :, j] > 1.0).max()) + 1 for j in range(cfg.m)]
        print(f"t={t_s:5d} s: furthest cell above 1 veh/km, cars {front[0]}, trucks {front[1]}")


if __name__ == "__main__":
    main()
