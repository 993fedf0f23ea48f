"""Fluid (first-order) approximation of densities and boundary counts.

The mean densities solve d rho/dt = L H Q(rho) and the mean counting
processes solve dY/dt = Q(rho), Y(0) = 0.  Both are integrated jointly with
classical fixed-step RK4; the step never exceeds the CFL bound and divides
the output interval, so output samples fall on integrator nodes.

The vector field is only piecewise smooth.  A step whose end state has a
different set of active flux branches than its start crossed a kink; such
steps are redone as ``KINK_SUBSTEPS`` equal substeps, which restores most
of the accuracy lost to the discontinuous Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import SegmentConfig, apply_incidence, assemble_rates, drift


KINK_SUBSTEPS = 32


class StepSizeError(ValueError):
    """Time step incompatible with the CFL bound."""


@dataclass(frozen=True)
class FluidTrajectory:
    config: SegmentConfig
    times: np.ndarray  # (n_t,) hours
    rho: np.ndarray  # (n_t, d*m) veh/km
    Y: np.ndarray  # (n_t, (d+1)*m) vehicles
    step: float  # internal RK4 step, hours
    substeps: int  # internal steps per output interval
    refined: frozenset = frozenset()  # flat indices of steps split at a kink crossing

    def at(self, t: float, atol: float = 1e-12) -> int:
        """Index of the grid time equal to ``t`` (hours)."""
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > atol * max(1.0, abs(t)):
            raise ValueError(f"time {t} h is not on the trajectory grid")
        return k


def project_state(config: SegmentConfig, rho: np.ndarray) -> np.ndarray:
    """Nearest admissible state cell by cell; absorbs integrator round-off."""
    m, d = config.m, config.d
    cells = rho.reshape(d, m)
    models = config.models
    if all(model is models[0] for model in models):
        return models[0].project_batch(cells).reshape(-1)
    out = np.empty_like(cells)
    for i in range(d):
        out[i] = models[i].project(models[i + 1].project(cells[i]))
    return out.reshape(-1)


def rates(config: SegmentConfig, rho: np.ndarray) -> np.ndarray:
    """Q(rho) evaluated on the projected state (integrator stages may stray by round-off)."""
    return assemble_rates(config, project_state(config, rho), check=False)


def vector_field(config: SegmentConfig, rho: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(d rho/dt, dY/dt) at a density state."""
    q = rates(config, rho)
    return config.inv_lengths * apply_incidence(q, config.m), q


def internal_grid(config: SegmentConfig, output_dt: float, max_step: float | None) -> tuple[float, int]:
    """Internal step and the number of steps per output interval."""
    cfl = config.cfl_bound()
    if not cfl > 0:
        raise StepSizeError("CFL bound is not positive")
    limit = cfl if max_step is None else min(cfl, max_step)
    n = max(1, math.ceil(output_dt / limit - 1e-12))
    return output_dt / n, n


def output_times(horizon: float, output_dt: float) -> np.ndarray:
    n = int(round(horizon / output_dt))
    if n < 1 or abs(n * output_dt - horizon) > 1e-9 * max(1.0, horizon):
        raise ValueError("horizon must be a positive multiple of output_dt")
    return np.arange(n + 1) * output_dt


def solve_fluid(
    config: SegmentConfig,
    horizon: float,
    output_dt: float,
    max_step: float | None = None,
) -> FluidTrajectory:
    """Integrate the fluid ODEs for rho and Y over [0, horizon] (hours)."""
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    times = output_times(horizon, output_dt)
    h, sub = internal_grid(config, output_dt, max_step)
    rho = np.array(config.initial_density, dtype=float)
    y = np.zeros((config.d + 1) * config.m)
    rho_out = np.empty((times.size, rho.size))
    y_out = np.empty((times.size, y.size))
    rho_out[0], y_out[0] = rho, y
    refined = set()
    sig = branch_signature(config, rho)
    n = 0
    for k in range(1, times.size):
        for _ in range(sub):
            new_rho, new_y = rk4_step(config, rho, y, h)
            new_sig = branch_signature(config, new_rho)
            if new_sig != sig:
                refined.add(n)
                new_rho, new_y = rho, y
                for _ in range(KINK_SUBSTEPS):
                    new_rho, new_y = rk4_step(config, new_rho, new_y, h / KINK_SUBSTEPS)
                new_sig = branch_signature(config, new_rho)
            rho, y, sig = new_rho, new_y, new_sig
            n += 1
        rho_out[k], y_out[k] = rho, y
    return FluidTrajectory(config, times, rho_out, y_out, h, sub, frozenset(refined))


def branch_signature(config: SegmentConfig, rho: np.ndarray) -> tuple:
    """Active branch of every boundary rate, including which side of each min() binds."""
    rho = project_state(config, rho)
    m, d = config.m, config.d
    first, last = rho[:m], rho[(d - 1) * m :]
    m0, md = config.models[0], config.models[d]
    parts = [
        m0._cap_branch(first, "in"),
        tuple(c < a for c, a in zip(m0.inflow_cap(first), config.arrival_rates)),
        md._cap_branch(last, "out"),
        tuple(c < a for c, a in zip(md.outflow_cap(last), config.departure_rates)),
    ]
    cells = rho.reshape(d, m)
    for model, ids in config._groups:
        parts.append(model.branch_keys(cells[ids - 1], cells[ids]))
    return tuple(parts)


def rk4_step(config: SegmentConfig, rho: np.ndarray, y: np.ndarray, h: float):
    k1, g1 = vector_field(config, rho)
    k2, g2 = vector_field(config, rho + 0.5 * h * k1)
    k3, g3 = vector_field(config, rho + 0.5 * h * k2)
    k4, g4 = vector_field(config, rho + h * k3)
    rho = rho + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    y = y + h / 6.0 * (g1 + 2 * g2 + 2 * g3 + g4)
    return rho, y


def godunov_step(config: SegmentConfig, rho: np.ndarray, dt: float) -> np.ndarray:
    """One explicit Godunov (cell transmission) update of the densities."""
    if dt > config.cfl_bound() * (1 + 1e-12):
        raise StepSizeError(f"step {dt} h exceeds the CFL bound {config.cfl_bound()} h")
    return rho + dt * drift(config, rho, check=False)


def godunov(config: SegmentConfig, horizon: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Iterate ``godunov_step`` from the initial state; returns (times, rho)."""
    n = int(round(horizon / dt))
    rho = np.array(config.initial_density, dtype=float)
    out = np.empty((n + 1, rho.size))
    out[0] = rho
    for k in range(n):
        rho = godunov_step(config, rho, dt)
        out[k + 1] = rho
    return np.arange(n + 1) * dt, out
