"""Simulation-versus-approximation comparison over a family of cell lengths.

For each cell length the exact process is replicated and compared with the
fluid mean and the diffusion standard deviation at every snapshot.  The
family report carries the checks used by the ``validate`` command.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .ctmc import MomentEstimate, replicate
from .diffusion import GaussianApprox, solve_covariance_rho
from .fluid import FluidTrajectory, solve_fluid
from .model import kink_distance
from .scenarios import Scenario, family

BAND_WIDTH = 3.0


@dataclass(frozen=True)
class LengthComparison:
    ell: float
    R: int
    times_s: np.ndarray
    mean_gap: np.ndarray  # (d*m,) max over time of |sim mean - fluid|, veh/km
    std_gap: np.ndarray  # (d*m,) max over time of |sim std - diffusion std|, veh/km
    mean_stderr: np.ndarray  # (d*m,) largest Monte-Carlo standard error of the mean, veh/km
    std_stderr: np.ndarray  # (d*m,) largest approximate standard error of the sample std, veh/km
    band_fraction: float  # share of (snapshot, coordinate) pairs with the fluid inside +-3 se
    far_snapshots: int  # snapshots further than the margin from every kink
    std_rel_gap: float  # largest relative std gap over those snapshots
    std_rel_ok_fraction: float  # share of far (snapshot, coordinate) pairs within tolerance
    conserved: bool | None = None  # closed systems only
    sim: MomentEstimate | None = field(default=None, repr=False, compare=False)
    fluid: FluidTrajectory | None = field(default=None, repr=False, compare=False)
    approx: GaussianApprox | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "ell_km": self.ell,
            "replications": self.R,
            "snapshots": int(self.times_s.size),
            "max_mean_gap_veh_per_km": self.mean_gap.tolist(),
            "max_std_gap_veh_per_km": self.std_gap.tolist(),
            "max_mean_stderr_veh_per_km": self.mean_stderr.tolist(),
            "max_std_stderr_veh_per_km": self.std_stderr.tolist(),
            "band_fraction": self.band_fraction,
            "far_from_kink_snapshots": self.far_snapshots,
            "max_std_rel_gap": self.std_rel_gap,
            "std_rel_ok_fraction": self.std_rel_ok_fraction,
            "conserved": self.conserved,
        }


def band_fraction(sim: MomentEstimate, fluid_mean: np.ndarray, width: float = BAND_WIDTH) -> float:
    """Share of (snapshot, coordinate) pairs where the fluid lies in mean +- width * se."""
    inside = np.abs(sim.mean - fluid_mean) <= width * sim.stderr
    return float(inside.mean())


def relative_std_gap(sim_std: np.ndarray, approx_std: np.ndarray) -> np.ndarray:
    """|s - a| / a, with 0 where both vanish and inf where only a vanishes."""
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.abs(sim_std - approx_std) / approx_std
    rel = np.where(approx_std > 0, rel, np.where(sim_std > 0, np.inf, 0.0))
    return rel


def far_from_kinks(config, fluid_rho: np.ndarray, margin: float) -> np.ndarray:
    return np.array([kink_distance(config, r) > margin for r in fluid_rho])


def compare_length(sc: Scenario, ell: float, replications: int | None = None,
                   keep: bool = False, workers: int = 1) -> LengthComparison:
    v = sc.validate
    member = family(sc, ell)
    cfg, run = member.config, member.run
    R = run.replications if replications is None else replications
    closed = not any(cfg.arrival_rates) and not any(cfg.departure_rates)
    sim = replicate(cfg, run.horizon_h, run.snapshot_dt_h, R, run.seed, keep_paths=closed, workers=workers)
    fluid = solve_fluid(cfg, run.horizon_h, run.snapshot_dt_h, max_step=run.max_step_h)
    approx = solve_covariance_rho(cfg, fluid, store_full=False)
    std = approx.std
    far = far_from_kinks(cfg, fluid.rho, v.kink_margin_veh_per_km)
    rel = relative_std_gap(sim.std, std)[far]
    conserved = None
    if closed:
        totals = sim.paths.sum(axis=2)
        conserved = bool(np.all(totals == totals[:, :1]))
    return LengthComparison(
        ell, R, sim.times * 3600.0,
        np.abs(sim.mean - fluid.rho).max(axis=0),
        np.abs(sim.std - std).max(axis=0),
        sim.stderr.max(axis=0),
        (sim.std / math.sqrt(2 * (R - 1))).max(axis=0),
        band_fraction(sim, fluid.rho),
        int(far.sum()),
        float(rel.max()) if rel.size else 0.0,
        float((rel <= v.std_rel_tol).mean()) if rel.size else 1.0,
        conserved,
        sim if keep else None, fluid if keep else None, approx if keep else None,
    )


@dataclass(frozen=True)
class ValidationReport:
    scenario: str
    rows: tuple[LengthComparison, ...]
    checks: dict[str, bool]

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "passed": self.passed,
            "checks": self.checks,
            "lengths": [r.to_dict() for r in self.rows],
        }


def nonincreasing(rows) -> bool:
    gaps = np.array([r.mean_gap for r in rows])
    return bool(np.all(np.diff(gaps, axis=0) <= 0))


def validate_family(sc: Scenario, replications: int | None = None, workers: int = 1) -> ValidationReport:
    """Run every member of the family and evaluate the applicable checks."""
    v = sc.validate
    if v is None:
        raise ValueError(f"scenario {sc.name!r} has no validate block")
    rows = tuple(compare_length(sc, ell, replications, workers=workers) for ell in sorted(v.lengths_km))
    last = rows[-1]
    checks: dict[str, bool] = {}
    if last.conserved is not None:
        checks["conservation"] = all(r.conserved for r in rows)
    else:
        checks["mean_gap_nonincreasing"] = nonincreasing(rows)
        checks["band_fraction"] = last.band_fraction >= v.band_fraction
        checks["std_relative_gap"] = last.std_rel_gap <= v.std_rel_tol
    return ValidationReport(sc.name, rows, checks)


__all__ = [
    "LengthComparison", "ValidationReport", "band_fraction", "compare_length", "far_from_kinks",
    "nonincreasing", "relative_std_gap", "validate_family",
]
