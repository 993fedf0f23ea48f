"""Segment configuration, rate assembly and the drift F(rho) = L H Q(rho).

Cells are numbered 1..d and boundaries 0..d (boundary i sits between cell i
and cell i+1; boundary 0 is the entrance, boundary d the exit).  Flat vectors
use the lexicographic layout ``(i - 1) * m + (j - 1)`` for cells and
``i * m + (j - 1)`` for boundaries, with classes j = 1..m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .flux import FluxModel


class StateSpaceError(ValueError):
    """A density state violates a cell's jam constraint."""


@dataclass(frozen=True, eq=False)
class SegmentConfig:
    """A road segment: cells, classes, flux models, boundary rates and initial state.

    ``models`` holds one flux model per boundary 0..d; pass a single model to
    share it.  Cell i must be admissible for both of its adjacent boundary
    models.
    """

    lengths: tuple[float, ...]
    models: tuple[FluxModel, ...]
    arrival_rates: tuple[float, ...]
    departure_rates: tuple[float, ...]
    initial_density: np.ndarray = field(repr=False)
    class_names: tuple[str, ...] = ()
    # boundaries 1..d-1 grouped by flux model, for batched evaluation
    _groups: tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        lengths = tuple(float(x) for x in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        d = len(lengths)
        if d < 1:
            raise ValueError("need at least one cell")
        if any(not x > 0 for x in lengths):
            raise ValueError("cell lengths must be positive")
        models = self.models
        if isinstance(models, FluxModel):
            models = (models,)
        models = tuple(models)
        if len(models) == 1:
            models = models * (d + 1)
        if len(models) != d + 1:
            raise ValueError(f"need 1 or {d + 1} flux models, got {len(models)}")
        m = models[0].m
        if any(model.m != m for model in models):
            raise ValueError("all flux models must share the class count")
        object.__setattr__(self, "models", models)
        lam = tuple(float(x) for x in self.arrival_rates)
        nu = tuple(float(x) for x in self.departure_rates)
        if len(lam) != m or len(nu) != m:
            raise ValueError("arrival/departure rates need one entry per class")
        if any(x < 0 for x in lam + nu):
            raise ValueError("boundary rates must be nonnegative")
        object.__setattr__(self, "arrival_rates", lam)
        object.__setattr__(self, "departure_rates", nu)
        rho0 = np.array(self.initial_density, dtype=float).reshape(-1)
        if rho0.size != d * m:
            raise ValueError(f"initial density needs {d * m} entries, got {rho0.size}")
        rho0.setflags(write=False)
        object.__setattr__(self, "initial_density", rho0)
        if not self.class_names:
            object.__setattr__(self, "class_names", tuple(f"class{j + 1}" for j in range(m)))
        groups: dict[int, list[int]] = {}
        for i in range(1, d):
            groups.setdefault(id(models[i]), []).append(i)
        object.__setattr__(
            self, "_groups", tuple((models[ids[0]], np.array(ids)) for ids in groups.values())
        )
        check_state(self, rho0)

    def __eq__(self, other):
        if not isinstance(other, SegmentConfig):
            return NotImplemented
        return (
            self.lengths == other.lengths and self.models == other.models
            and self.arrival_rates == other.arrival_rates and self.departure_rates == other.departure_rates
            and np.array_equal(self.initial_density, other.initial_density)
            and self.class_names == other.class_names
        )

    __hash__ = None

    @property
    def d(self) -> int:
        return len(self.lengths)

    @property
    def m(self) -> int:
        return self.models[0].m

    @property
    def inv_lengths(self) -> np.ndarray:
        """Diagonal of L: 1/l_i repeated m times per cell."""
        return np.repeat(1.0 / np.asarray(self.lengths), self.m)

    @property
    def jam_counts(self) -> np.ndarray:
        """X^jam_ij = floor(rho^jam_ij * l_i), flat cell layout."""
        out = np.empty(self.d * self.m, dtype=np.int64)
        for i in range(self.d):
            jam = [min(a, b) for a, b in zip(self.models[i].jam_densities(), self.models[i + 1].jam_densities())]
            for j in range(self.m):
                # guard against floor(1e3 - 1e-13) style round-off
                out[i * self.m + j] = math.floor(jam[j] * self.lengths[i] + 1e-9)
        return out

    @property
    def initial_counts(self) -> np.ndarray:
        """X(0) = l_i * rho(0), rounded to the nearest vehicle."""
        return np.rint(self.initial_density * np.repeat(self.lengths, self.m)).astype(np.int64)

    def cell(self, rho: np.ndarray, i: int) -> np.ndarray:
        """Densities of cell ``i`` (1-based)."""
        return rho[(i - 1) * self.m : i * self.m]

    def cfl_bound(self) -> float:
        """Largest stable explicit step (h): min_i l_i / v_max."""
        v_max = max(model.max_speed for model in self.models)
        return min(self.lengths) / v_max

    def with_lengths(self, lengths: Sequence[float]) -> "SegmentConfig":
        return SegmentConfig(
            tuple(lengths), self.models, self.arrival_rates, self.departure_rates,
            self.initial_density, self.class_names,
        )


def cell_index(i: int, j: int, m: int, d: int | None = None) -> int:
    """Flat index of cell i (1-based), class j (1-based)."""
    if i < 1 or (d is not None and i > d) or not 1 <= j <= m:
        raise IndexError(f"cell ({i}, {j}) out of range")
    return (i - 1) * m + (j - 1)


def cell_from_index(k: int, m: int, d: int | None = None) -> tuple[int, int]:
    if k < 0 or (d is not None and k >= d * m):
        raise IndexError(f"flat cell index {k} out of range")
    return k // m + 1, k % m + 1


def boundary_index(i: int, j: int, m: int, d: int | None = None) -> int:
    """Flat index of boundary i (0-based, 0..d), class j (1-based)."""
    if i < 0 or (d is not None and i > d) or not 1 <= j <= m:
        raise IndexError(f"boundary ({i}, {j}) out of range")
    return i * m + (j - 1)


def boundary_from_index(k: int, m: int, d: int | None = None) -> tuple[int, int]:
    if k < 0 or (d is not None and k >= (d + 1) * m):
        raise IndexError(f"flat boundary index {k} out of range")
    return k // m, k % m + 1


def check_state(config: SegmentConfig, rho: np.ndarray) -> None:
    m = config.m
    for i in range(config.d):
        cell = rho[i * m : (i + 1) * m]
        if not (config.models[i].admissible(cell) and config.models[i + 1].admissible(cell)):
            raise StateSpaceError(f"cell {i + 1} state {cell.tolist()} outside the state space")


def boundary_rate(config: SegmentConfig, rho: np.ndarray, i: int) -> tuple[float, ...]:
    """Rates q_{i, .}(rho) at boundary i as a tuple of m floats."""
    m, d = config.m, config.d
    model = config.models[i]
    if i == 0:
        cap = model.inflow_cap(rho[:m])
        return tuple(min(a, c) for a, c in zip(config.arrival_rates, cap))
    if i == d:
        cap = model.outflow_cap(rho[(d - 1) * m :])
        return tuple(min(a, c) for a, c in zip(config.departure_rates, cap))
    return model.flux(rho[(i - 1) * m : i * m], rho[i * m : (i + 1) * m])


def assemble_rates(config: SegmentConfig, rho: np.ndarray, check: bool = True) -> np.ndarray:
    """Full rate vector Q(rho), length (d+1)*m."""
    rho = np.asarray(rho, dtype=float)
    if check:
        check_state(config, rho)
    m, d = config.m, config.d
    out = np.empty((d + 1, m))
    out[0] = boundary_rate(config, rho, 0)
    out[d] = boundary_rate(config, rho, d)
    cells = rho.reshape(d, m)
    for model, ids in config._groups:
        out[ids] = model.flux_batch(cells[ids - 1], cells[ids])
    return out.reshape(-1)


def structure_matrices(config: SegmentConfig) -> tuple[np.ndarray, np.ndarray]:
    """Incidence matrix H (dm x (d+1)m) and diagonal L (dm x dm)."""
    dm = config.d * config.m
    H = np.eye(dm, dm + config.m) - np.eye(dm, dm + config.m, k=config.m)
    return H, np.diag(config.inv_lengths)


def apply_incidence(q: np.ndarray, m: int) -> np.ndarray:
    """H @ q without forming H: inflow minus outflow per cell."""
    return q[:-m] - q[m:]


def drift(config: SegmentConfig, rho: np.ndarray, check: bool = True) -> np.ndarray:
    """F(rho): component (i, j) equals (q_{i-1,j} - q_{i,j}) / l_i."""
    q = assemble_rates(config, rho, check=check)
    return config.inv_lengths * apply_incidence(q, config.m)


def drift_matrix_form(config: SegmentConfig, rho: np.ndarray) -> np.ndarray:
    """F(rho) via explicit L @ H @ Q; the independent route for ``drift``."""
    H, L = structure_matrices(config)
    return L @ (H @ assemble_rates(config, rho))


def rate_jacobian(config: SegmentConfig, rho: np.ndarray) -> np.ndarray:
    """Weak Jacobian dQ/drho, shape ((d+1)m, dm)."""
    rho = np.asarray(rho, dtype=float)
    m, d = config.m, config.d
    jac = np.zeros((d + 1, m, d, m))
    jac[0, :, 0] = _capped_jacobian(config.models[0], rho[:m], config.arrival_rates, "in")
    jac[d, :, d - 1] = _capped_jacobian(config.models[d], rho[(d - 1) * m :], config.departure_rates, "out")
    cells = rho.reshape(d, m)
    for model, ids in config._groups:
        g = model.gradient_batch(cells[ids - 1], cells[ids])
        jac[ids, :, ids - 1] = g[:, :, :m]
        jac[ids, :, ids] = g[:, :, m:]
    return jac.reshape((d + 1) * m, d * m)


def _capped_jacobian(model: FluxModel, cell, limit, side) -> np.ndarray:
    # min(limit_j, cap_j): for each coordinate pick the side active for an increase
    m = model.m
    cap_fn = model.inflow_cap if side == "in" else model.outflow_cap
    grad = model.cap_gradient(cell, side)
    out = np.zeros((m, m))
    for k in range(m):
        xp = np.array(cell, dtype=float)
        xp[k] += 1e-9 * max(1.0, abs(xp[k]))
        cap = cap_fn(xp)
        for j in range(m):
            if cap[j] < limit[j]:
                out[j, k] = grad[j, k]
    return out


def drift_jacobian(config: SegmentConfig, rho: np.ndarray) -> np.ndarray:
    """Weak Jacobian of the drift, dF = L H dQ, shape (dm, dm)."""
    dq = rate_jacobian(config, rho)
    return config.inv_lengths[:, None] * apply_incidence(dq, config.m)


def kink_distance(config: SegmentConfig, rho: np.ndarray) -> float:
    """Smallest distance (veh/km) of a state to a kink of any boundary rate."""
    m, d = config.m, config.d
    dist = config.models[0].cap_kink_distance(rho[:m], config.arrival_rates, "in")
    dist = min(dist, config.models[d].cap_kink_distance(rho[(d - 1) * m :], config.departure_rates, "out"))
    for i in range(1, d):
        dist = min(dist, config.models[i].kink_distance(rho[(i - 1) * m : i * m], rho[i * m : (i + 1) * m]))
    return dist
