"""Exact simulation of the vehicle-count Markov jump process.

State: integer counts X (per cell and class) and crossing counters Y (per
boundary and class).  An event at boundary i, class j moves one class-j
vehicle from cell i to cell i+1 (an arrival for i = 0, a departure for
i = d) and increments Y_{i,j}; hence X(t) = X(0) + H Y(t) on every path.

Events are drawn Gillespie-style: one exponential clock at the total rate
and a categorical draw proportional to the rates.  A jump changes only the
two adjacent cells, so only the rates of boundaries i-1, i, i+1 are
recomputed.  Rates are per hour and clocks run in hours.
"""

from __future__ import annotations

import bisect
import itertools
import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .model import SegmentConfig, StateSpaceError, check_state

_UNIFORM_BATCH = 4096


@dataclass
class CountState:
    X: np.ndarray  # (d*m,) int64 vehicles per cell/class
    Y: np.ndarray  # ((d+1)*m,) int64 crossings per boundary/class
    t: float = 0.0  # hours

    @classmethod
    def initial(cls, config: SegmentConfig) -> "CountState":
        X = config.initial_counts.copy()
        state = cls(X, np.zeros((config.d + 1) * config.m, dtype=np.int64))
        try:
            check_state(config, densities(config, X))
        except StateSpaceError as exc:
            raise StateSpaceError(f"rounded initial counts leave the state space: {exc}") from None
        return state


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray  # (n_s,) hours
    X: np.ndarray  # (n_s, d*m) left-limit counts at the snapshot times
    Y: np.ndarray  # (n_s, (d+1)*m)
    seed: object
    events: int
    compensator: np.ndarray | None = None  # (n_s, (d+1)*m): integral of Q along the path

    def density(self, config: SegmentConfig) -> np.ndarray:
        return self.X / np.repeat(config.lengths, config.m)


@dataclass(frozen=True)
class MomentEstimate:
    times: np.ndarray  # hours
    mean: np.ndarray  # (n_s, d*m) veh/km
    std: np.ndarray  # (n_s, d*m) veh/km, unbiased
    Y_mean: np.ndarray  # (n_s, (d+1)*m)
    R: int
    seed_scheme: str
    paths: np.ndarray | None = None  # (R, n_s, d*m) counts, when kept

    @property
    def stderr(self) -> np.ndarray:
        return self.std / math.sqrt(self.R)


def densities(config: SegmentConfig, X: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=float) / np.repeat(config.lengths, config.m)


class _Rates:
    """Guarded boundary rates over a list-backed count vector."""

    def __init__(self, config: SegmentConfig):
        self.config = config
        self.m, self.d = config.m, config.d
        self.lengths = list(config.lengths)
        self.models = config.models
        self.jam = config.jam_counts.tolist()
        self.lam = config.arrival_rates
        self.nu = config.departure_rates

    def cell(self, X: list[int], c: int) -> list[float]:
        m, ell = self.m, self.lengths[c]
        return [X[c * m + j] / ell for j in range(m)]

    def can_receive(self, X: list[int], c: int, j: int) -> bool:
        # a one-vehicle jump may overshoot a composition-dependent constraint
        k = c * self.m + j
        if X[k] + 1 > self.jam[k]:
            return False
        post = self.cell(X, c)
        post[j] += 1.0 / self.lengths[c]
        return self.models[c].admissible(post) and self.models[c + 1].admissible(post)

    def boundary(self, X: list[int], i: int) -> list[float]:
        m, d = self.m, self.d
        model = self.models[i]
        if i == 0:
            first = self.cell(X, 0)
            q = [min(a, b) for a, b in zip(self.lam, model.inflow_cap(first))]
        elif i == d:
            last = self.cell(X, d - 1)
            q = [min(a, b) for a, b in zip(self.nu, model.outflow_cap(last))]
        else:
            q = list(model.flux(self.cell(X, i - 1), self.cell(X, i)))
        for j in range(m):
            if q[j] <= 0.0:
                q[j] = 0.0
            elif (i > 0 and X[(i - 1) * m + j] == 0) or (i < d and not self.can_receive(X, i, j)):
                q[j] = 0.0
        return q

    def full(self, X: list[int]) -> list[float]:
        out: list[float] = []
        for i in range(self.d + 1):
            out.extend(self.boundary(X, i))
        return out

    def update(self, X: list[int], rates: list[float], i: int) -> None:
        m = self.m
        for b in range(max(0, i - 1), min(self.d, i + 1) + 1):
            rates[b * m : (b + 1) * m] = self.boundary(X, b)


def event_rates(config: SegmentConfig, X: np.ndarray) -> np.ndarray:
    """Full guarded rate vector of a count state (veh/h)."""
    return np.array(_Rates(config).full([int(x) for x in X]))


def local_rate_update(config: SegmentConfig, state: CountState, rates: np.ndarray, boundary: int) -> np.ndarray:
    """Rates after a jump at ``boundary``; only boundaries boundary-1..boundary+1 change."""
    if not 0 <= boundary <= config.d:
        raise IndexError(f"boundary {boundary} out of range")
    out = [float(r) for r in rates]
    _Rates(config).update([int(x) for x in state.X], out, boundary)
    return np.array(out)


def apply_event(config: SegmentConfig, state: CountState, event: int) -> None:
    """Apply the jump of flat boundary index ``event`` in place."""
    m, d = config.m, config.d
    i, j = divmod(event, m)
    state.Y[event] += 1
    if i > 0:
        state.X[(i - 1) * m + j] -= 1
    if i < d:
        state.X[i * m + j] += 1


def snapshot_times(horizon: float, snapshot_dt: float) -> np.ndarray:
    n = int(round(horizon / snapshot_dt))
    if not horizon > 0 or not snapshot_dt > 0 or abs(n * snapshot_dt - horizon) > 1e-9 * horizon:
        raise ValueError("horizon must be a positive multiple of snapshot_dt")
    return np.arange(n + 1) * snapshot_dt


def simulate_path(
    config: SegmentConfig,
    horizon: float,
    snapshot_dt: float,
    seed: int | np.random.SeedSequence = 0,
    compensator: bool = False,
) -> Trajectory:
    """One exact path on [0, horizon] (hours), sampled at multiples of ``snapshot_dt``."""
    times = snapshot_times(horizon, snapshot_dt).tolist()
    rng = np.random.Generator(np.random.PCG64(seed))
    engine = _Rates(config)
    m, d = config.m, config.d
    X = CountState.initial(config).X.tolist()
    Y = [0] * ((d + 1) * m)
    rates = engine.full(X)
    comp = [0.0] * len(Y) if compensator else None
    X_out, Y_out, C_out = [], [], []
    t, k, events = 0.0, 0, 0
    uniforms: list[float] = []
    pos = 0
    n_snap = len(times)
    while k < n_snap:
        total = sum(rates)
        if total <= 0.0:
            t_next = math.inf
        else:
            if pos + 2 > len(uniforms):
                uniforms, pos = rng.random(_UNIFORM_BATCH).tolist(), 0
            t_next = t - math.log1p(-uniforms[pos]) / total
            pos += 1
        # left limits: the state is constant on [t, t_next)
        while k < n_snap and times[k] <= t_next:
            if comp is not None:
                dt = times[k] - t
                C_out.append([c + r * dt for c, r in zip(comp, rates)])
            X_out.append(list(X))
            Y_out.append(list(Y))
            k += 1
        if k >= n_snap:
            break
        if comp is not None:
            dt = t_next - t
            comp = [c + r * dt for c, r in zip(comp, rates)]
        cum = list(itertools.accumulate(rates))
        u = uniforms[pos] * cum[-1]
        pos += 1
        # bisect_right never lands on a zero-rate entry since u < cum[-1]
        e = min(bisect.bisect_right(cum, u), len(cum) - 1)
        i, j = divmod(e, m)
        Y[e] += 1
        if i > 0:
            X[(i - 1) * m + j] -= 1
        if i < d:
            X[i * m + j] += 1
        engine.update(X, rates, i)
        t = t_next
        events += 1
    return Trajectory(
        np.array(times), np.array(X_out, dtype=np.int64), np.array(Y_out, dtype=np.int64),
        seed, events, np.array(C_out) if comp is not None else None,
    )


def path_seeds(base_seed: int, R: int) -> list[np.random.SeedSequence]:
    """Pairwise-distinct child seeds: SeedSequence(base_seed).spawn(R)."""
    return np.random.SeedSequence(base_seed).spawn(R)


SEED_SCHEME = "numpy SeedSequence(base_seed).spawn(R) -> PCG64, one child per path"


class MomentAccumulator:
    """Exact integer sums of X, X^2 and Y; merging is associative and commutative."""

    def __init__(self, times: np.ndarray, dm: int, dY: int):
        self.times = times
        self.n = 0
        self.s1 = np.zeros((times.size, dm), dtype=np.int64)
        self.s2 = np.zeros((times.size, dm), dtype=np.int64)
        self.sy = np.zeros((times.size, dY), dtype=np.int64)

    def add(self, path: Trajectory) -> None:
        self.s1 += path.X
        self.s2 += path.X * path.X
        self.sy += path.Y
        self.n += 1

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        out = MomentAccumulator(self.times, self.s1.shape[1], self.sy.shape[1])
        out.n = self.n + other.n
        out.s1, out.s2, out.sy = self.s1 + other.s1, self.s2 + other.s2, self.sy + other.sy
        return out

    def estimate(self, config: SegmentConfig, paths: np.ndarray | None = None) -> MomentEstimate:
        R = self.n
        if R < 2:
            raise ValueError("need at least two replications")
        ell = np.repeat(config.lengths, config.m)
        # exact integer numerators, then one division each
        s1, s2 = self.s1.astype(object), self.s2.astype(object)
        num = (s2 * R - s1 * s1).astype(float)
        var = np.maximum(num, 0.0) / (R * (R - 1)) / ell**2
        mean = self.s1.astype(float) / R / ell
        return MomentEstimate(
            self.times, mean, np.sqrt(var), self.sy.astype(float) / R, R, SEED_SCHEME, paths,
        )


def _accumulate(config, horizon, snapshot_dt, seeds, keep_paths):
    times = snapshot_times(horizon, snapshot_dt)
    acc = MomentAccumulator(times, config.d * config.m, (config.d + 1) * config.m)
    kept = []
    for s in seeds:
        path = simulate_path(config, horizon, snapshot_dt, s)
        acc.add(path)
        if keep_paths:
            kept.append(path.X)
    return acc, kept


def replicate(
    config: SegmentConfig,
    horizon: float,
    snapshot_dt: float,
    R: int,
    base_seed: int = 0,
    keep_paths: bool = False,
    seeds: Iterable[np.random.SeedSequence] | None = None,
    workers: int = 1,
) -> MomentEstimate:
    """Sample mean and standard deviation of rho over R independent paths.

    With ``workers > 1`` paths run in a process pool in contiguous seed
    chunks; integer sums make the result identical to the serial run.
    """
    if R < 2:
        raise ValueError("need at least two replications")
    seeds = path_seeds(base_seed, R) if seeds is None else list(seeds)
    if workers <= 1 or len(seeds) < 2 * workers:
        acc, kept = _accumulate(config, horizon, snapshot_dt, seeds, keep_paths)
    else:
        from concurrent.futures import ProcessPoolExecutor

        chunks = [c.tolist() for c in np.array_split(np.array(seeds, dtype=object), workers)]
        with ProcessPoolExecutor(workers) as pool:
            parts = list(pool.map(_accumulate, *zip(*[(config, horizon, snapshot_dt, c, keep_paths) for c in chunks])))
        acc, kept = parts[0]
        for other, more in parts[1:]:
            acc = acc.merge(other)
            kept = kept + more
    return acc.estimate(config, np.array(kept) if keep_paths else None)
