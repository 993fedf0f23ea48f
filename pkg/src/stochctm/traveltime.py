"""Travel-time distributions from the Gaussian approximation of the counts.

Vehicles of one class do not overtake each other, so a class-j vehicle in
cell i at time t has left cell i+k within x exactly when

    Y_{i+k, j}(t + x) >= Y_{i-1, j}(t).

With D(x) = Y_{i+k,j}(t+x) - Y_{i-1,j}(t) approximately normal, the CDF is
P(T <= x) = Phi(mu_D / sigma_D).  Times in this module are in seconds, the
public unit of queries; the approximation grid itself is in hours.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr

from .diffusion import CovarianceFault, GaussianApprox, cross_cov_entry, solve_covariance_y
from .fluid import solve_fluid
from .model import SegmentConfig, boundary_index

SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class TravelTimeQuery:
    """Class ``j`` vehicle in cell ``i`` at ``t`` seconds, leaving cell ``i + k``."""

    i: int
    k: int
    j: int
    t: float
    grid: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(x) for x in self.grid))
        if self.i < 1 or self.k < 0 or self.j < 1:
            raise ValueError("need i >= 1, k >= 0, j >= 1")
        if self.t < 0:
            raise ValueError("tag time must be nonnegative")
        g = np.asarray(self.grid)
        if g.size < 1 or g[0] < 0 or np.any(np.diff(g) <= 0):
            raise ValueError("grid must be nonnegative and strictly increasing")

    def validate(self, config: SegmentConfig) -> None:
        if self.i + self.k > config.d:
            raise ValueError(f"destination cell {self.i + self.k} beyond d = {config.d}")
        if self.j > config.m:
            raise ValueError(f"class {self.j} beyond m = {config.m}")

    def boundaries(self, m: int) -> tuple[int, int]:
        """Flat Y indices (a, b): exit of cell i+k and entry of cell i."""
        return boundary_index(self.i + self.k, self.j, m), boundary_index(self.i - 1, self.j, m)


@dataclass(frozen=True)
class TravelTimeDistribution:
    x: np.ndarray  # seconds
    cdf: np.ndarray
    mean_gap: np.ndarray  # mu_D(x), vehicles
    std_gap: np.ndarray  # sigma_D(x), vehicles

    @property
    def pdf(self) -> np.ndarray:
        return travel_time_pdf(self)

    def quantile(self, p: float) -> float:
        return quantile(self, p)

    @property
    def max_decrease(self) -> float:
        """Largest drop between consecutive CDF values (0 for a monotone CDF)."""
        return float(max(0.0, -np.diff(self.cdf).min())) if self.cdf.size > 1 else 0.0


def travel_time_cdf(
    config: SegmentConfig,
    query: TravelTimeQuery,
    approx: GaussianApprox,
    continuity_correction: bool = False,
) -> TravelTimeDistribution:
    """Gaussian approximation of P(T_{i,i+k,j}(t) <= x) on the query grid."""
    if approx.kind != "Y":
        raise ValueError("travel times need the counting-process approximation")
    query.validate(config)
    a, b = query.boundaries(config.m)
    t = query.t / SECONDS_PER_HOUR
    x = np.asarray(query.grid)
    if t + x[-1] / SECONDS_PER_HOUR > approx.times[-1] * (1 + 1e-12):
        raise ValueError("query grid extends past the approximation horizon")
    kt = approx.index(t)
    mu = np.empty(x.size)
    var = np.empty(x.size)
    for n, xn in enumerate(x):
        tx = t + xn / SECONDS_PER_HOUR
        kx = approx.index(tx)
        gamma = cross_cov_entry(approx, approx.times[kt], approx.times[kx], b, a)
        mu[n] = approx.mean[kx, a] - approx.mean[kt, b]
        var[n] = approx.var[kx, a] + approx.var[kt, b] - 2.0 * gamma
    scale = max(1.0, float(np.abs(approx.var[:, [a, b]]).max()))
    if var.min() < -1e-9 * scale:
        raise CovarianceFault(f"negative travel-time variance {var.min():.3e}")
    sigma = np.sqrt(np.maximum(var, 0.0))
    shift = 0.5 if continuity_correction else 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (mu + shift) / sigma
    cdf = np.where(sigma > 0, ndtr(np.where(sigma > 0, z, 0.0)), (mu + shift >= 0).astype(float))
    return TravelTimeDistribution(x.copy(), np.clip(cdf, 0.0, 1.0), mu, sigma)


def travel_time_pdf(dist: TravelTimeDistribution) -> np.ndarray:
    """Central differences of the CDF (one-sided at the ends), clamped at 0; per second."""
    x, F = dist.x, dist.cdf
    if x.size < 3:
        raise ValueError("density needs at least 3 grid points")
    f = np.gradient(F, x, edge_order=1)
    return np.maximum(f, 0.0)


def quantile(dist: TravelTimeDistribution, p: float) -> float:
    """Smallest grid x with F(x) >= p."""
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    hit = np.flatnonzero(dist.cdf >= p)
    if hit.size == 0 or (hit[0] == 0 and dist.cdf[0] > p):
        raise ValueError(f"probability {p} not bracketed by the grid")
    return float(dist.x[hit[0]])


def approximate_counts(
    config: SegmentConfig,
    queries: Sequence[TravelTimeQuery],
    output_dt_s: float,
    max_step_s: float | None = None,
) -> GaussianApprox:
    """Fluid + Y-covariance solve covering every query, with cross-covariance anchors.

    Only the columns each query needs are propagated across time, which keeps
    large segments cheap compared with storing the fundamental matrix.
    """
    if not queries:
        raise ValueError("no travel-time queries")
    dt = output_dt_s / SECONDS_PER_HOUR
    horizon_s = max(q.t + q.grid[-1] for q in queries)
    steps = int(np.ceil(horizon_s / output_dt_s - 1e-9))
    anchors: dict[float, list[int]] = {}
    for q in queries:
        q.validate(config)
        if abs(q.t / output_dt_s - round(q.t / output_dt_s)) > 1e-9:
            raise ValueError("tag time must lie on the output grid")
        cols = anchors.setdefault(round(q.t / output_dt_s) * dt, [])
        b = q.boundaries(config.m)[1]
        if b not in cols:
            cols.append(b)
    max_step = None if max_step_s is None else max_step_s / SECONDS_PER_HOUR
    fluid = solve_fluid(config, steps * dt, dt, max_step=max_step)
    return solve_covariance_y(config, fluid, store_full=False, anchors=anchors)
