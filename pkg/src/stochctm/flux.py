"""Discrete flux-functions for the cell transmission model.

Two macroscopic fundamental diagrams are provided: the single-class Daganzo
sending/receiving flux and the two-class Chanut-Buisson flux.  Units are km,
hours, veh/km and veh/h throughout.

Every :class:`FluxModel` exposes the boundary flux between an upstream and a
downstream cell, the boundary caps used at the segment ends, and a *weak*
gradient.  At points where the flux is not differentiable, the gradient of a
coordinate is the one-sided derivative of the branch that is active when that
density is increased slightly, clipped to ``[-K, K]`` with ``K`` the model's
``lipschitz_bound``.
"""

from __future__ import annotations

import enum
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Hashable, NamedTuple, Sequence

import numpy as np

# Relative size of the density increment used to pick the active branch.
_BRANCH_EPS = 1e-9


class DomainError(ValueError):
    """Density outside the admissible state space of a flux model."""


class DegenerateInputError(ValueError):
    """Formula undefined at the given input (0/0 and similar)."""


# --------------------------------------------------------------------------
# Daganzo
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class DaganzoParams:
    v_f: float
    w: float
    q_max: float
    rho_jam: float

    def __post_init__(self):
        for name in ("v_f", "w", "q_max", "rho_jam"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.w > self.v_f:
            raise ValueError("backward wave speed w must not exceed v_f")
        if self.q_max > self.v_f * self.rho_jam:
            raise ValueError("q_max must be attainable: q_max <= v_f * rho_jam")

    @property
    def sending_critical(self) -> float:
        """Density where the sending function saturates at capacity."""
        return self.q_max / self.v_f

    @property
    def receiving_critical(self) -> float:
        """Density above which the receiving function drops below capacity."""
        return self.rho_jam - self.q_max / self.w


def _check_daganzo_domain(rho: float, p: DaganzoParams) -> None:
    if not (0.0 <= rho <= p.rho_jam):
        raise DomainError(f"density {rho} outside [0, {p.rho_jam}]")


def daganzo_sending(rho: float, p: DaganzoParams) -> float:
    _check_daganzo_domain(rho, p)
    return min(p.v_f * rho, p.q_max)


def daganzo_receiving(rho: float, p: DaganzoParams) -> float:
    _check_daganzo_domain(rho, p)
    return min(p.w * (p.rho_jam - rho), p.q_max)


def daganzo_flux(rho_up: float, rho_dn: float, p: DaganzoParams) -> np.ndarray:
    return np.array([min(daganzo_sending(rho_up, p), daganzo_receiving(rho_dn, p))])


# --------------------------------------------------------------------------
# Chanut-Buisson
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CBParams:
    v_f1: float
    v_f2: float
    v_c: float
    L1: float
    L2: float
    N: int
    beta: float

    def __post_init__(self):
        if not (0 < self.v_c < self.v_f2 <= self.v_f1):
            raise ValueError("need 0 < v_c < v_f2 <= v_f1")
        if not (0 < self.L1 <= self.L2):
            raise ValueError("need 0 < L1 <= L2")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("lane count N must be a positive integer")
        if not (0.2 <= self.beta <= 0.5):
            raise ValueError("beta must lie in [0.2, 0.5]")

    @property
    def e(self) -> float:
        """Passenger-car equivalent of one truck."""
        return self.L2 / self.L1

    @property
    def critical_occupancy(self) -> float:
        """Lane-km occupied per km at the free-flow/congestion boundary."""
        return self.beta * self.N

    @property
    def capacity(self) -> float:
        """C = v_c * rho_c(rho1, 0), the PCE capacity (veh/h)."""
        return self.v_c * self.beta * self.N / self.L1

    def occupancy(self, rho1: float, rho2: float) -> float:
        return rho1 * self.L1 + rho2 * self.L2


class Regime(enum.Enum):
    FREE_FLOW = "free_flow"
    CONGESTED = "congested"


class CBFlows(NamedTuple):
    q1: float
    q2: float
    v1: float
    v2: float


def _check_cb_domain(rho1: float, rho2: float, p: CBParams) -> None:
    if rho1 < 0 or rho2 < 0:
        raise DomainError("densities must be nonnegative")
    # small slack: the jam state itself is admissible and floats round
    if p.occupancy(rho1, rho2) > p.N * (1 + 1e-12):
        raise DomainError(f"occupancy {p.occupancy(rho1, rho2)} exceeds lane count {p.N}")


def cb_jam_density(rho1: float, rho2: float, p: CBParams) -> float:
    if rho1 + rho2 <= 0:
        raise DegenerateInputError("jam density undefined for an empty cell")
    _check_cb_domain(rho1, rho2, p)
    return p.N * (rho1 + rho2) / p.occupancy(rho1, rho2)


def cb_regime(rho1: float, rho2: float, p: CBParams) -> Regime:
    _check_cb_domain(rho1, rho2, p)
    # rho1 + rho2 <= beta * rho_jam  <=>  occupancy <= beta * N
    if p.occupancy(rho1, rho2) <= p.critical_occupancy:
        return Regime.FREE_FLOW
    return Regime.CONGESTED


def _cb_speeds_free(rho1, rho2, p):
    u = p.occupancy(rho1, rho2) / p.critical_occupancy
    return p.v_f1 - (p.v_f1 - p.v_c) * u, p.v_f2 - (p.v_f2 - p.v_c) * u


def _cb_pce_flow_congested(rho1, rho2, p):
    return p.capacity * (1.0 - p.occupancy(rho1, rho2) / p.N) / (1.0 - p.beta)


def cb_class_flows(rho1: float, rho2: float, p: CBParams) -> CBFlows:
    """Class flows and speeds of a homogeneous cell state."""
    if cb_regime(rho1, rho2, p) is Regime.FREE_FLOW:
        v1, v2 = _cb_speeds_free(rho1, rho2, p)
        return CBFlows(rho1 * v1, rho2 * v2, v1, v2)
    v = _cb_pce_flow_congested(rho1, rho2, p) / (rho1 + p.e * rho2)
    return CBFlows(rho1 * v, rho2 * v, v, v)


def cb_shock_speed(up: Sequence[float], dn: Sequence[float], p: CBParams) -> float:
    """Speed of the shock between two states given as (rho1, rho2, q1, q2)."""
    e = p.e
    den = (up[0] + e * up[1]) - (dn[0] + e * dn[1])
    if den == 0:
        raise DegenerateInputError("shock speed undefined: equal PCE densities")
    return ((up[2] + e * up[3]) - (dn[2] + e * dn[3])) / den


def _cb_send_receive(rho1, rho2, p):
    """(Delta_1, Delta_2, Omega) of one cell: sent class flows, received PCE flow."""
    flows = cb_class_flows(rho1, rho2, p)
    if cb_regime(rho1, rho2, p) is Regime.FREE_FLOW:
        return flows.q1, flows.q2, p.capacity
    pce = rho1 + p.e * rho2
    return rho1 * p.capacity / pce, rho2 * p.capacity / pce, pce * flows.v1


class CBCase(enum.Enum):
    INTERMEDIATE = "intermediate"
    SEND = "send"
    RECEIVE = "receive"


def _cb_case(up, dn, p) -> tuple[Regime, Regime, CBCase]:
    ru = cb_regime(up[0], up[1], p)
    rd = cb_regime(dn[0], dn[1], p)
    if ru is Regime.FREE_FLOW and rd is Regime.CONGESTED:
        fu = cb_class_flows(up[0], up[1], p)
        fd = cb_class_flows(dn[0], dn[1], p)
        try:
            s = cb_shock_speed((up[0], up[1], fu.q1, fu.q2), (dn[0], dn[1], fd.q1, fd.q2), p)
        except DegenerateInputError:
            s = 0.0
        if s < 0:
            return ru, rd, CBCase.INTERMEDIATE
    d1, d2, _ = _cb_send_receive(up[0], up[1], p)
    _, _, omega = _cb_send_receive(dn[0], dn[1], p)
    if d1 + p.e * d2 <= omega:
        return ru, rd, CBCase.SEND
    return ru, rd, CBCase.RECEIVE


def cb_flux(up: Sequence[float], dn: Sequence[float], p: CBParams) -> np.ndarray:
    """Boundary flows (q1, q2) between an upstream and a downstream CB cell."""
    _check_cb_domain(up[0], up[1], p)
    _check_cb_domain(dn[0], dn[1], p)
    _, _, case = _cb_case(up, dn, p)
    if case is CBCase.INTERMEDIATE:
        fu = cb_class_flows(up[0], up[1], p)
        fd = cb_class_flows(dn[0], dn[1], p)
        s = cb_shock_speed((up[0], up[1], fu.q1, fu.q2), (dn[0], dn[1], fd.q1, fd.q2), p)
        v = fd.v1
        return np.array([v * (fu.q1 - s * up[0]) / (v - s), v * (fu.q2 - s * up[1]) / (v - s)])
    d1, d2, _ = _cb_send_receive(up[0], up[1], p)
    if case is CBCase.SEND:
        return np.array([d1, d2])
    _, _, omega = _cb_send_receive(dn[0], dn[1], p)
    pce = up[0] + p.e * up[1]
    return np.array([up[0] / pce * omega, up[1] / pce * omega])


# --------------------------------------------------------------------------
# Pluggable flux models
# --------------------------------------------------------------------------


class FluxModel(ABC):
    """A discrete flux-function with boundary caps and a weak gradient.

    Immutable after construction.  Densities are passed as length-``m``
    sequences; ``flux`` returns a tuple of ``m`` floats (a tuple rather than an
    array because the stochastic simulator calls it once per event).
    """

    m: int
    lipschitz_bound: float

    @abstractmethod
    def flux(self, up: Sequence[float], dn: Sequence[float]) -> tuple[float, ...]: ...

    @abstractmethod
    def inflow_cap(self, first: Sequence[float]) -> tuple[float, ...]:
        """sup over the (virtual) upstream state of the flux into ``first``."""

    @abstractmethod
    def outflow_cap(self, last: Sequence[float]) -> tuple[float, ...]:
        """sup over the (virtual) downstream state of the flux out of ``last``."""

    @abstractmethod
    def admissible(self, rho: Sequence[float]) -> bool:
        """Whether a cell state satisfies the jam constraint."""

    @abstractmethod
    def project(self, rho: np.ndarray) -> np.ndarray:
        """Nearest admissible cell state; absorbs integrator round-off."""

    @abstractmethod
    def jam_densities(self) -> tuple[float, ...]:
        """Per-class jam density of a cell holding only that class."""

    @property
    @abstractmethod
    def max_speed(self) -> float:
        """Largest free-flow speed, used for the CFL bound."""

    @abstractmethod
    def kink_distance(self, up: Sequence[float], dn: Sequence[float]) -> float:
        """Euclidean distance (veh/km) of (up, dn) to the flux's non-smooth set.

        Exact for Daganzo; a first-order estimate for Chanut-Buisson.
        """

    @abstractmethod
    def cap_kink_distance(self, rho: Sequence[float], limit: Sequence[float], side: str) -> float:
        """Distance of a boundary cell state to the kinks of min(limit, cap)."""

    # Branch machinery.  A branch key identifies a smooth piece; the analytic
    # Jacobian of that piece is evaluated at the unperturbed point.
    @abstractmethod
    def _branch(self, up, dn) -> Hashable: ...

    @abstractmethod
    def _branch_jacobian(self, up, dn, key) -> np.ndarray: ...

    @abstractmethod
    def _cap_branch(self, rho, side) -> Hashable: ...

    @abstractmethod
    def _cap_branch_jacobian(self, rho, side, key) -> np.ndarray: ...

    def gradient(self, up: Sequence[float], dn: Sequence[float]) -> np.ndarray:
        """Weak Jacobian of the flux, shape (m, 2m): columns are up_1..up_m, dn_1..dn_m."""
        m = self.m
        x = np.concatenate([np.asarray(up, float), np.asarray(dn, float)])
        jac = np.empty((m, 2 * m))
        cache: dict = {}
        for k in range(2 * m):
            xp = x.copy()
            xp[k] += _BRANCH_EPS * max(1.0, abs(x[k]))
            key = self._branch(xp[:m], xp[m:])
            if key not in cache:
                with np.errstate(divide="ignore", invalid="ignore"):
                    cache[key] = self._branch_jacobian(x[:m], x[m:], key)
            jac[:, k] = cache[key][:, k]
        # a branch met only after the increment may be singular at x itself (0/0 shock speed)
        return np.clip(np.nan_to_num(jac), -self.lipschitz_bound, self.lipschitz_bound)

    # Batched evaluation over n boundaries at once.  ``up`` and ``dn`` are
    # (n, m) arrays.  The defaults loop over the scalar methods; concrete
    # models override them with vectorised versions that must agree.
    def flux_batch(self, up: np.ndarray, dn: np.ndarray) -> np.ndarray:
        out = np.empty((len(up), self.m))
        for k in range(len(up)):
            out[k] = self.flux(up[k], dn[k])
        return out

    def gradient_batch(self, up: np.ndarray, dn: np.ndarray) -> np.ndarray:
        """Stacked weak Jacobians, shape (n, m, 2m)."""
        out = np.empty((len(up), self.m, 2 * self.m))
        for k in range(len(up)):
            out[k] = self.gradient(up[k], dn[k])
        return out

    def project_batch(self, rho: np.ndarray) -> np.ndarray:
        return np.array([self.project(r) for r in rho]).reshape(rho.shape)

    def branch_keys(self, up: np.ndarray, dn: np.ndarray) -> tuple:
        """Active smooth branch per boundary; a change marks a kink crossing."""
        return tuple(self._branch(a, b) for a, b in zip(up, dn))

    def cap_gradient(self, rho: Sequence[float], side: str) -> np.ndarray:
        """Weak Jacobian (m, m) of ``inflow_cap`` (side="in") or ``outflow_cap`` (side="out")."""
        m = self.m
        x = np.asarray(rho, float)
        jac = np.empty((m, m))
        cache: dict = {}
        for k in range(m):
            xp = x.copy()
            xp[k] += _BRANCH_EPS * max(1.0, abs(x[k]))
            key = self._cap_branch(xp, side)
            if key not in cache:
                cache[key] = self._cap_branch_jacobian(x, side, key)
            jac[:, k] = cache[key][:, k]
        return np.clip(jac, -self.lipschitz_bound, self.lipschitz_bound)


def _segment_distance(p, a, b) -> float:
    p, a, b = (np.asarray(z, float) for z in (p, a, b))
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / np.dot(ab, ab), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


@dataclass(frozen=True)
class DaganzoFlux(FluxModel):
    params: DaganzoParams

    m = 1

    @property
    def lipschitz_bound(self) -> float:
        return max(self.params.v_f, self.params.w)

    @property
    def max_speed(self) -> float:
        return self.params.v_f

    def flux(self, up, dn):
        p = self.params
        return (min(p.v_f * up[0], p.w * (p.rho_jam - dn[0]), p.q_max),)

    def inflow_cap(self, first):
        p = self.params
        return (min(p.w * (p.rho_jam - first[0]), p.q_max),)

    def outflow_cap(self, last):
        p = self.params
        return (min(p.v_f * last[0], p.q_max),)

    def admissible(self, rho):
        return 0.0 <= rho[0] <= self.params.rho_jam

    def project(self, rho):
        return np.clip(rho, 0.0, self.params.rho_jam)

    def jam_densities(self):
        return (self.params.rho_jam,)

    def _branch(self, up, dn):
        p = self.params
        s, r = p.v_f * up[0], p.w * (p.rho_jam - dn[0])
        if s <= r and s <= p.q_max:
            return "S"
        if r < s and r <= p.q_max:
            return "R"
        return "Q"

    def _branch_jacobian(self, up, dn, key):
        if key == "S":
            return np.array([[self.params.v_f, 0.0]])
        if key == "R":
            return np.array([[0.0, -self.params.w]])
        return np.zeros((1, 2))

    def _cap_branch(self, rho, side):
        p = self.params
        if side == "in":
            return "R" if p.w * (p.rho_jam - rho[0]) < p.q_max else "Q"
        return "S" if p.v_f * rho[0] < p.q_max else "Q"

    def _cap_branch_jacobian(self, rho, side, key):
        if key == "R":
            return np.array([[-self.params.w]])
        if key == "S":
            return np.array([[self.params.v_f]])
        return np.zeros((1, 1))

    def flux_batch(self, up, dn):
        p = self.params
        return np.minimum(np.minimum(p.v_f * up, p.w * (p.rho_jam - dn)), p.q_max)

    def gradient_batch(self, up, dn):
        p = self.params
        up, dn = up[:, 0], dn[:, 0]
        out = np.zeros((up.size, 1, 2))
        # column 0: bump the upstream density; column 1: the downstream one
        for col, (u, v) in enumerate(
            ((up + _BRANCH_EPS * np.maximum(1.0, np.abs(up)), dn),
             (up, dn + _BRANCH_EPS * np.maximum(1.0, np.abs(dn))))
        ):
            s, r = p.v_f * u, p.w * (p.rho_jam - v)
            sending = (s <= r) & (s <= p.q_max)
            receiving = ~sending & (r < s) & (r <= p.q_max)
            if col == 0:
                out[:, 0, 0] = np.where(sending, p.v_f, 0.0)
            else:
                out[:, 0, 1] = np.where(receiving, -p.w, 0.0)
        return out

    def project_batch(self, rho):
        return np.clip(rho, 0.0, self.params.rho_jam)

    def kink_distance(self, up, dn):
        p = self.params
        rs, rr = p.sending_critical, p.receiving_critical
        pt = (up[0], dn[0])
        return min(
            # S = R switching line between the two linear branches
            _segment_distance(pt, (0.0, p.rho_jam), (rs, rr)),
            # sending saturates while receiving is at capacity
            _segment_distance(pt, (rs, 0.0), (rs, rr)),
            # receiving leaves capacity while sending is at capacity
            _segment_distance(pt, (rs, rr), (p.rho_jam, rr)),
        )

    def cap_kink_distance(self, rho, limit, side):
        p = self.params
        lim = limit[0]
        if side == "in":
            # min(lim, R(rho)): kink where R crosses lim, or R's own kink if lim >= q_max
            if lim <= 0:
                return math.inf
            at = p.rho_jam - min(lim, p.q_max) / p.w
        else:
            if lim <= 0:
                return math.inf
            at = min(lim, p.q_max) / p.v_f
        return abs(rho[0] - at)


def _free_quantities(rho, p: CBParams):
    """Values and gradients (w.r.t. (rho1, rho2)) of free-flow cell quantities."""
    rho1, rho2 = rho
    du = np.array([p.L1, p.L2]) / p.critical_occupancy
    v1, v2 = _cb_speeds_free(rho1, rho2, p)
    dv1 = -(p.v_f1 - p.v_c) * du
    dv2 = -(p.v_f2 - p.v_c) * du
    q1, q2 = rho1 * v1, rho2 * v2
    dq1 = np.array([v1, 0.0]) + rho1 * dv1
    dq2 = np.array([0.0, v2]) + rho2 * dv2
    return {
        "q": (q1, q2), "dq": (dq1, dq2),
        "v": v1, "dv": dv1,
        "delta": (q1, q2), "ddelta": (dq1, dq2),
        "omega": p.capacity, "domega": np.zeros(2),
        "pce": rho1 + p.e * rho2, "dpce": np.array([1.0, p.e]),
    }


def _congested_quantities(rho, p: CBParams):
    rho1, rho2 = rho
    pce = rho1 + p.e * rho2
    dpce = np.array([1.0, p.e])
    qp = _cb_pce_flow_congested(rho1, rho2, p)
    dqp = -p.capacity / (p.N * (1.0 - p.beta)) * np.array([p.L1, p.L2])
    v = qp / pce
    dv = dqp / pce - qp * dpce / pce**2
    q1, q2 = rho1 * v, rho2 * v
    dq1 = np.array([v, 0.0]) + rho1 * dv
    dq2 = np.array([0.0, v]) + rho2 * dv
    c = p.capacity
    d1, d2 = rho1 * c / pce, rho2 * c / pce
    dd1 = c * (np.array([1.0, 0.0]) / pce - rho1 * dpce / pce**2)
    dd2 = c * (np.array([0.0, 1.0]) / pce - rho2 * dpce / pce**2)
    return {
        "q": (q1, q2), "dq": (dq1, dq2),
        "v": v, "dv": dv,
        "delta": (d1, d2), "ddelta": (dd1, dd2),
        "omega": qp, "domega": dqp,
        "pce": pce, "dpce": dpce,
    }


def _cb_quantities(rho, regime: Regime, p: CBParams):
    if regime is Regime.FREE_FLOW:
        return _free_quantities(rho, p)
    return _congested_quantities(rho, p)


class _CBCells(NamedTuple):
    """Per-cell CB quantities for both regimes; axis 1 indexes (free, congested)."""

    free: np.ndarray  # (n,) bool
    pce: np.ndarray  # (n,)
    q: np.ndarray  # (n, 2, 2) regime, class
    dq: np.ndarray  # (n, 2, 2, 2) regime, class, d/d rho_k
    v: np.ndarray  # (n, 2) class-1 speed
    dv: np.ndarray  # (n, 2, 2)
    delta: np.ndarray  # (n, 2, 2)
    ddelta: np.ndarray  # (n, 2, 2, 2)
    omega: np.ndarray  # (n, 2)
    domega: np.ndarray  # (n, 2, 2)


def _cb_cells(rho: np.ndarray, p: CBParams) -> _CBCells:
    r1, r2 = rho[:, 0], rho[:, 1]
    n = r1.size
    e, c = p.e, p.capacity
    occ = p.L1 * r1 + p.L2 * r2
    pce = r1 + e * r2
    dpce = np.array([1.0, e])
    q = np.empty((n, 2, 2))
    dq = np.zeros((n, 2, 2, 2))
    v = np.empty((n, 2))
    dv = np.empty((n, 2, 2))
    delta = np.empty((n, 2, 2))
    ddelta = np.empty((n, 2, 2, 2))
    omega = np.empty((n, 2))
    domega = np.zeros((n, 2, 2))

    du = np.array([p.L1, p.L2]) / p.critical_occupancy
    u = occ / p.critical_occupancy
    v1 = p.v_f1 - (p.v_f1 - p.v_c) * u
    v2 = p.v_f2 - (p.v_f2 - p.v_c) * u
    dv1 = -(p.v_f1 - p.v_c) * du
    dv2 = -(p.v_f2 - p.v_c) * du
    q[:, 0, 0], q[:, 0, 1] = r1 * v1, r2 * v2
    dq[:, 0, 0] = r1[:, None] * dv1
    dq[:, 0, 0, 0] += v1
    dq[:, 0, 1] = r2[:, None] * dv2
    dq[:, 0, 1, 1] += v2
    v[:, 0], dv[:, 0] = v1, dv1
    delta[:, 0], ddelta[:, 0] = q[:, 0], dq[:, 0]
    omega[:, 0] = c

    # congested values of near-empty cells overflow harmlessly: those cells are free-flow
    with np.errstate(all="ignore"):
        safe = np.where(pce > 0, pce, 1.0)
        qp = c * (1.0 - occ / p.N) / (1.0 - p.beta)
        dqp = -c / (p.N * (1.0 - p.beta)) * np.array([p.L1, p.L2])
        vc = qp / safe
        dvc = dqp[None, :] / safe[:, None] - (qp / safe**2)[:, None] * dpce
        q[:, 1, 0], q[:, 1, 1] = r1 * vc, r2 * vc
        dq[:, 1, 0] = r1[:, None] * dvc
        dq[:, 1, 0, 0] += vc
        dq[:, 1, 1] = r2[:, None] * dvc
        dq[:, 1, 1, 1] += vc
        v[:, 1], dv[:, 1] = vc, dvc
        delta[:, 1, 0], delta[:, 1, 1] = r1 * c / safe, r2 * c / safe
        for j, r in enumerate((r1, r2)):
            ddelta[:, 1, j] = -c * (r / safe**2)[:, None] * dpce
            ddelta[:, 1, j, j] += c / safe
        omega[:, 1] = qp
        domega[:, 1] = dqp
    return _CBCells(occ <= p.critical_occupancy, pce, q, dq, v, dv, delta, ddelta, omega, domega)


_SEND, _RECEIVE, _INTERMEDIATE = 0, 1, 2


def _cb_cases(cu: _CBCells, cd: _CBCells, p: CBParams):
    """Regime indices (0 free, 1 congested) and flux case per boundary."""
    n = cu.pce.size
    idx = np.arange(n)
    ru = (~cu.free).astype(int)
    rd = (~cd.free).astype(int)
    e = p.e
    den = cu.pce - cd.pce
    flow_u = cu.q[idx, ru, 0] + e * cu.q[idx, ru, 1]
    flow_d = cd.q[idx, rd, 0] + e * cd.q[idx, rd, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (flow_u - flow_d) / np.where(den != 0, den, 1.0)
    inter = cu.free & ~cd.free & (den != 0) & (s < 0)
    send = cu.delta[idx, ru, 0] + e * cu.delta[idx, ru, 1] <= cd.omega[idx, rd]
    case = np.where(inter, _INTERMEDIATE, np.where(send, _SEND, _RECEIVE))
    return ru, rd, case, np.where(den != 0, s, 0.0)


def cb_flux_batch(up: np.ndarray, dn: np.ndarray, p: CBParams) -> np.ndarray:
    """Vectorised :func:`cb_flux` over (n, 2) arrays of cell pairs (no domain checks)."""
    cu, cd = _cb_cells(up, p), _cb_cells(dn, p)
    ru, rd, case, s = _cb_cases(cu, cd, p)
    idx = np.arange(up.shape[0])
    out = cu.delta[idx, ru].copy()
    rec = case == _RECEIVE
    if rec.any():
        share = up[rec] / cu.pce[rec, None]
        out[rec] = share * cd.omega[idx[rec], rd[rec]][:, None]
    mid = case == _INTERMEDIATE
    if mid.any():
        v = cd.v[mid, 1][:, None]
        sm = s[mid][:, None]
        out[mid] = v * (cu.q[mid, 0] - sm * up[mid]) / (v - sm)
    return out


def _cb_jacobian_candidates(up, dn, cu: _CBCells, cd: _CBCells, p: CBParams):
    """Jacobians (n, 2, 4) of every smooth piece, evaluated at (up, dn).

    Returns (send[regime_u], receive[regime_d], intermediate).
    """
    n = up.shape[0]
    e = p.e
    dpce = np.array([1.0, e])
    send = np.zeros((n, 2, 2, 4))
    send[:, :, :, :2] = cu.ddelta
    recv = np.zeros((n, 2, 2, 4))
    with np.errstate(divide="ignore", invalid="ignore"):
        pos = cu.pce > 0
        safe = np.where(pos, cu.pce, 1.0)
        for j in range(2):
            base = -(up[:, j] / safe**2)[:, None] * dpce
            base[:, j] += 1.0 / safe
            recv[:, :, j, :2] = cd.omega[:, :, None] * base[:, None, :]
            recv[:, :, j, 2:] = (up[:, j] / safe)[:, None, None] * cd.domega
        recv[~pos] = 0.0

        # free upstream, congested downstream, negative shock speed
        den = cu.pce - cd.pce
        den = np.where(den != 0, den, np.nan)
        flow_u = cu.q[:, 0, 0] + e * cu.q[:, 0, 1]
        flow_d = cd.q[:, 1, 0] + e * cd.q[:, 1, 1]
        s = (flow_u - flow_d) / den
        dflow_u = cu.dq[:, 0, 0] + e * cu.dq[:, 0, 1]
        dflow_d = cd.dq[:, 1, 0] + e * cd.dq[:, 1, 1]
        ds = np.concatenate(
            [(dflow_u - s[:, None] * dpce) / den[:, None], (-dflow_d + s[:, None] * dpce) / den[:, None]], axis=1
        )
        v = cd.v[:, 1]
        dv = np.concatenate([np.zeros((n, 2)), cd.dv[:, 1]], axis=1)
        b = v - s
        db = dv - ds
        inter = np.empty((n, 2, 4))
        for j in range(2):
            a = cu.q[:, 0, j] - s * up[:, j]
            da = np.concatenate([cu.dq[:, 0, j], np.zeros((n, 2))], axis=1) - up[:, j, None] * ds
            da[:, j] -= s
            inter[:, j] = (dv * a[:, None] + v[:, None] * da) / b[:, None] - (v * a / b**2)[:, None] * db
    return send, recv, inter



@dataclass(frozen=True)
class ChanutBuissonFlux(FluxModel):
    params: CBParams

    m = 2

    @property
    def lipschitz_bound(self) -> float:
        # Largest entry of the weak Jacobian: the receive branch reaches
        # Omega * e / pce with Omega <= v_f1 * pce, hence (1 + e) * v_f1 bounds it;
        # the spectral norm of the 2x4 block stays below 2 * (1 + e) * v_f1.
        p = self.params
        return 2.0 * (1.0 + p.e) * p.v_f1

    @property
    def max_speed(self) -> float:
        return self.params.v_f1

    def flux(self, up, dn):
        return tuple(cb_flux(up, dn, self.params))

    def inflow_cap(self, first):
        # an all-class-j upstream state in congestion sends Omega PCE, i.e. Omega / e_j vehicles
        _, _, omega = _cb_send_receive(first[0], first[1], self.params)
        return (omega, omega / self.params.e)

    def outflow_cap(self, last):
        d1, d2, _ = _cb_send_receive(last[0], last[1], self.params)
        return (d1, d2)

    def admissible(self, rho):
        p = self.params
        return rho[0] >= 0 and rho[1] >= 0 and p.occupancy(rho[0], rho[1]) <= p.N * (1 + 1e-12)

    def project(self, rho):
        p = self.params
        rho = np.maximum(rho, 0.0)
        occ = p.occupancy(rho[0], rho[1])
        return rho * (p.N / occ) if occ > p.N else rho

    def jam_densities(self):
        p = self.params
        return (p.N / p.L1, p.N / p.L2)

    def flux_batch(self, up, dn):
        return cb_flux_batch(np.asarray(up, float), np.asarray(dn, float), self.params)

    def gradient_batch(self, up, dn):
        p = self.params
        up, dn = np.asarray(up, float), np.asarray(dn, float)
        n = up.shape[0]
        idx = np.arange(n)
        cu, cd = _cb_cells(up, p), _cb_cells(dn, p)
        send, recv, inter = _cb_jacobian_candidates(up, dn, cu, cd, p)
        out = np.empty((n, 2, 4))
        for k in range(4):
            if k < 2:
                xp = up.copy()
                xp[:, k] += _BRANCH_EPS * np.maximum(1.0, np.abs(xp[:, k]))
                ru, rd, case, _ = _cb_cases(_cb_cells(xp, p), cd, p)
            else:
                xp = dn.copy()
                xp[:, k - 2] += _BRANCH_EPS * np.maximum(1.0, np.abs(xp[:, k - 2]))
                ru, rd, case, _ = _cb_cases(cu, _cb_cells(xp, p), p)
            col = np.where(
                (case == _SEND)[:, None],
                send[idx, ru, :, k],
                np.where((case == _RECEIVE)[:, None], recv[idx, rd, :, k], inter[:, :, k]),
            )
            out[:, :, k] = col
        return np.clip(np.nan_to_num(out), -self.lipschitz_bound, self.lipschitz_bound)

    def branch_keys(self, up, dn):
        p = self.params
        ru, rd, case, _ = _cb_cases(_cb_cells(np.asarray(up, float), p), _cb_cells(np.asarray(dn, float), p), p)
        return (ru.tobytes(), rd.tobytes(), case.tobytes())

    def project_batch(self, rho):
        p = self.params
        rho = np.maximum(rho, 0.0)
        occ = rho @ np.array([p.L1, p.L2])
        scale = np.where(occ > p.N, p.N / np.where(occ > 0, occ, 1.0), 1.0)
        return rho * scale[:, None]

    def _regime_unchecked(self, rho):
        p = self.params
        if p.occupancy(rho[0], rho[1]) <= p.critical_occupancy:
            return Regime.FREE_FLOW
        return Regime.CONGESTED

    def _branch(self, up, dn):
        p = self.params
        ru, rd = self._regime_unchecked(up), self._regime_unchecked(dn)
        qu, qd = _cb_quantities(up, ru, p), _cb_quantities(dn, rd, p)
        if ru is Regime.FREE_FLOW and rd is Regime.CONGESTED:
            den = qu["pce"] - qd["pce"]
            if den != 0:
                s = ((qu["q"][0] + p.e * qu["q"][1]) - (qd["q"][0] + p.e * qd["q"][1])) / den
                if s < 0:
                    return ru, rd, CBCase.INTERMEDIATE
        send = qu["delta"][0] + p.e * qu["delta"][1]
        if send <= qd["omega"]:
            return ru, rd, CBCase.SEND
        return ru, rd, CBCase.RECEIVE

    def _branch_jacobian(self, up, dn, key):
        p = self.params
        ru, rd, case = key
        qu, qd = _cb_quantities(up, ru, p), _cb_quantities(dn, rd, p)
        jac = np.zeros((2, 4))
        if case is CBCase.SEND:
            jac[0, :2] = qu["ddelta"][0]
            jac[1, :2] = qu["ddelta"][1]
            return jac
        if case is CBCase.RECEIVE:
            pce, omega = qu["pce"], qd["omega"]
            if pce <= 0:
                return jac
            for j in range(2):
                unit = np.eye(2)[j]
                jac[j, :2] = omega * (unit / pce - up[j] * qu["dpce"] / pce**2)
                jac[j, 2:] = up[j] / pce * qd["domega"]
            return jac
        # intermediate state of the Riemann problem (negative shock speed)
        e = p.e
        den = qu["pce"] - qd["pce"]
        flow_u = qu["q"][0] + e * qu["q"][1]
        flow_d = qd["q"][0] + e * qd["q"][1]
        s = (flow_u - flow_d) / den
        dflow_u = qu["dq"][0] + e * qu["dq"][1]
        dflow_d = qd["dq"][0] + e * qd["dq"][1]
        ds = np.concatenate([(dflow_u - s * qu["dpce"]) / den, (-dflow_d + s * qd["dpce"]) / den])
        v = qd["v"]
        dv = np.concatenate([np.zeros(2), qd["dv"]])
        b = v - s
        db = dv - ds
        for j in range(2):
            a = qu["q"][j] - s * up[j]
            da = np.concatenate([qu["dq"][j], np.zeros(2)]) - up[j] * ds
            da[j] -= s
            jac[j] = dv * a / b + v * da / b - v * a * db / b**2
        return jac

    def _cap_branch(self, rho, side):
        return self._regime_unchecked(rho)

    def _cap_branch_jacobian(self, rho, side, key):
        q = _cb_quantities(rho, key, self.params)
        if side == "in":
            return np.vstack([q["domega"], q["domega"] / self.params.e])
        return np.vstack([q["ddelta"][0], q["ddelta"][1]])

    def _regime_distance(self, rho):
        p = self.params
        return abs(p.occupancy(rho[0], rho[1]) - p.critical_occupancy) / math.hypot(p.L1, p.L2)

    def kink_distance(self, up, dn):
        p = self.params
        dist = min(self._regime_distance(up), self._regime_distance(dn))
        ru, rd, case = self._branch(up, dn)
        qu, qd = _cb_quantities(up, ru, p), _cb_quantities(dn, rd, p)
        if case is not CBCase.INTERMEDIATE:
            gap = qu["delta"][0] + p.e * qu["delta"][1] - qd["omega"]
            grad = np.concatenate([qu["ddelta"][0] + p.e * qu["ddelta"][1], -qd["domega"]])
            norm = np.linalg.norm(grad)
            dist = min(dist, abs(gap) / norm if norm > 0 else (0.0 if gap == 0 else math.inf))
        return float(dist)

    def cap_kink_distance(self, rho, limit, side):
        dist = self._regime_distance(rho)
        cap = self.inflow_cap(rho) if side == "in" else self.outflow_cap(rho)
        jac = self.cap_gradient(rho, side)
        for j in range(2):
            if limit[j] <= 0:
                continue
            norm = np.linalg.norm(jac[j])
            gap = abs(cap[j] - limit[j])
            dist = min(dist, gap / norm if norm > 0 else math.inf)
        return float(dist)


def flux_gradient(model: FluxModel, rho_up: Sequence[float], rho_dn: Sequence[float]) -> np.ndarray:
    return model.gradient(rho_up, rho_dn)


def inflow_cap(model: FluxModel, rho_first: Sequence[float]) -> np.ndarray:
    return np.array(model.inflow_cap(rho_first))


def outflow_cap(model: FluxModel, rho_last: Sequence[float]) -> np.ndarray:
    return np.array(model.outflow_cap(rho_last))


def model_from_dict(block: dict) -> FluxModel:
    """Build a flux model from its scenario-file parameter block."""
    kind = block.get("type")
    fields = {k: v for k, v in block.items() if k != "type"}
    try:
        if kind == "daganzo":
            return DaganzoFlux(DaganzoParams(**fields))
        if kind == "chanut_buisson":
            return ChanutBuissonFlux(CBParams(**fields))
    except TypeError as exc:
        raise ValueError(f"bad {kind} parameter block: {exc}") from None
    raise ValueError(f"unknown MFD type {kind!r}")


def model_to_dict(model: FluxModel) -> dict:
    if isinstance(model, DaganzoFlux):
        p = model.params
        return {"type": "daganzo", "v_f": p.v_f, "w": p.w, "q_max": p.q_max, "rho_jam": p.rho_jam}
    if isinstance(model, ChanutBuissonFlux):
        p = model.params
        return {
            "type": "chanut_buisson", "v_f1": p.v_f1, "v_f2": p.v_f2, "v_c": p.v_c,
            "L1": p.L1, "L2": p.L2, "N": p.N, "beta": p.beta,
        }
    raise TypeError(f"cannot serialise {type(model).__name__}")
