"""Backward-moving jam and merging shocks: fluid totals per cell over time.

    python3 scripts/jam_and_shocks.py --out results/phenomena
"""

import argparse
from pathlib import Path

import numpy as np

from stochctm.cli import field_rows, write_table
from stochctm.diffusion import solve_covariance_rho
from stochctm.fluid import solve_fluid
from stochctm.scenarios import preset


def run(name: str, out: Path, dt_s: float, marks: tuple[int, ...]) -> None:
    sc = preset(name)
    cfg = sc.config
    fluid = solve_fluid(cfg, sc.run.horizon_h, dt_s / 3600.0)
    approx = solve_covariance_rho(cfg, fluid, store_full=False)
    tot = fluid.rho.reshape(-1, cfg.d, cfg.m).sum(axis=2)
    write_table(out / f"{name}_mean.csv", field_rows(cfg, fluid.times, fluid.rho, "veh/km", tot))
    write_table(out / f"{name}_std.csv", field_rows(cfg, fluid.times, approx.std, "veh/km",
                                                      np.sqrt(np.maximum(approx.var_total, 0.0))))
    np.set_printoptions(precision=0, suppress=True, linewidth=200)
    print(name)
    for t_s in marks:
        k = fluid.at(t_s / 3600.0)
        print(f"  t={t_s:5d} s argmax cell {int(np.argmax(tot[k])) + 1:3d}  {tot[k]}")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/phenomena"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    run("backward-jam", args.out, 10.0, (0, 300, 600, 900, 1200, 1500))
    run("shocks", args.out, 10.0, (0, 100, 200, 300, 400, 500))


if __name__ == "__main__":
    main()
