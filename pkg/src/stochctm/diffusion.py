"""Gaussian (second-order) approximation around the fluid path.

For the density process the fluctuation obeys the linear SDE

    d rho_hat = dF(rho_bar) rho_hat dt + L H Sigma dB,      Sigma = diag(sqrt(Q)),

so its covariance solves the Lyapunov ODE

    dV/dt = A V + V A^T + (L H) diag(Q) (L H)^T,            A = dF(rho_bar(t)).

The counting process uses A_Y = dQ(rho_bar) L H and noise diag(Q).  Cross-time
covariances follow from the fundamental matrix dPhi/dt = A Phi, Phi(0) = I:
cov(x(s), x(t)) = V(s) Psi(t, s)^T with Psi(t, s) = Phi(t) Phi(s)^{-1}.

All matrix ODEs are integrated with RK4 on the fluid trajectory's own grid,
jointly with the mean, so the recomputed mean equals the fluid solution.
The mean of the fluctuation is identically zero (exact initial data).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import scipy.linalg

from .fluid import KINK_SUBSTEPS, FluidTrajectory, project_state, rates
from .model import SegmentConfig, apply_incidence, rate_jacobian, structure_matrices

Kind = Literal["rho", "Y"]


class CovarianceFault(ArithmeticError):
    """Covariance lost positive semidefiniteness beyond round-off."""


@dataclass
class GaussianApprox:
    """Mean path and covariances of the Gaussian approximation.

    ``var`` always holds diag V(t).  ``V`` and ``Phi`` are kept for every grid
    point only when requested (they cost n_t * D^2 floats).  ``anchors`` maps
    an anchor time s to ``(columns, G)`` where ``G[k] = cov(x(t_k), x(s))[:, columns]``
    for t_k >= s (NaN before s).
    """

    kind: Kind
    config: SegmentConfig
    times: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    sigma_diag: np.ndarray  # sqrt of the rates, i.e. diag Sigma(rho_bar(t))
    V: np.ndarray | None = None
    Phi: np.ndarray | None = None
    log_det_liouville: np.ndarray | None = None
    anchors: dict[float, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    min_eigenvalue: float = 0.0
    var_total: np.ndarray | None = None  # (n_t, d) variance of the class sum per cell ("rho" only)

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.var, 0.0))

    def index(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"time {t} h is not on the approximation grid")
        return k

    def anchor(self, s: float) -> tuple[np.ndarray, np.ndarray]:
        for key, value in self.anchors.items():
            if abs(key - s) <= 1e-9 * max(1.0, abs(s)):
                return value
        raise KeyError(f"no cross-covariance anchor at {s} h")


def _rk4(f, state: list[np.ndarray], h: float) -> list[np.ndarray]:
    k1 = f(state)
    k2 = f([x + 0.5 * h * k for x, k in zip(state, k1)])
    k3 = f([x + 0.5 * h * k for x, k in zip(state, k2)])
    k4 = f([x + h * k for x, k in zip(state, k3)])
    return [x + h / 6.0 * (a + 2 * b + 2 * c + e) for x, a, b, c, e in zip(state, k1, k2, k3, k4)]


def _linearisation(config: SegmentConfig, rho: np.ndarray, kind: Kind, LH: np.ndarray):
    """(A, noise covariance, rates) at a mean density state."""
    rho = project_state(config, rho)
    q = np.maximum(rates(config, rho), 0.0)
    dq = rate_jacobian(config, rho)
    if kind == "rho":
        A = config.inv_lengths[:, None] * apply_incidence(dq, config.m)
        noise = (LH * q) @ LH.T
    else:
        A = dq @ LH
        noise = np.diag(q)
    return A, noise, q


def _integrate(
    fluid: FluidTrajectory,
    kind: Kind,
    store_full: bool,
    fundamental: bool,
    anchors: dict[float, Sequence[int]] | None,
) -> GaussianApprox:
    config = fluid.config
    H, L = structure_matrices(config)
    LH = L @ H
    dim = config.d * config.m if kind == "rho" else (config.d + 1) * config.m
    n_t = fluid.times.size
    h, sub = fluid.step, fluid.substeps
    anchor_cols = {}
    for s, cols in (anchors or {}).items():
        k = fluid.at(s)
        anchor_cols[k] = (float(fluid.times[k]), np.asarray(cols, dtype=int))
    # per-anchor column matrices live at the end of the state list
    anchor_keys = sorted(anchor_cols)
    live: list[int] = []

    mean_out = np.empty((n_t, dim))
    var_out = np.empty((n_t, dim))
    sig_out = np.empty((n_t, (config.d + 1) * config.m))
    V_out = np.empty((n_t, dim, dim)) if store_full else None
    Phi_out = np.empty((n_t, dim, dim)) if fundamental else None
    logdet = np.empty(n_t) if fundamental else None
    tot_out = np.empty((n_t, config.d)) if kind == "rho" else None
    G_out = {k: np.full((n_t, dim, anchor_cols[k][1].size), np.nan) for k in anchor_keys}

    rho = np.array(config.initial_density, dtype=float)
    y = np.zeros((config.d + 1) * config.m)
    V = np.zeros((dim, dim))
    Phi = np.eye(dim)
    z = np.zeros(1)
    G: dict[int, np.ndarray] = {}
    min_eig = 0.0

    def rhs(state):
        rho_s = state[0]
        A, noise, q = _linearisation(config, rho_s, kind, LH)
        drho = config.inv_lengths * apply_incidence(q, config.m)
        V_s = state[2]
        out = [drho, q, A @ V_s + V_s @ A.T + noise]
        if fundamental:
            out += [A @ state[3], np.array([np.trace(A)])]
        out += [A @ g for g in state[len(out) :]]
        return out

    def record(k):
        nonlocal min_eig
        mean_out[k] = rho if kind == "rho" else y
        var_out[k] = np.diag(V)
        if tot_out is not None:
            m = config.m
            blocks = V.reshape(config.d, m, config.d, m)
            tot_out[k] = np.einsum("iaib->i", blocks)
        sig_out[k] = np.sqrt(np.maximum(rates(config, rho), 0.0))
        if V_out is not None:
            V_out[k] = V
        if Phi_out is not None:
            Phi_out[k] = Phi
            logdet[k] = z[0]
        if k in anchor_cols:
            G[k] = V[:, anchor_cols[k][1]].copy()
            live.append(k)
        for a in live:
            G_out[a][k] = G[a]
        if dim <= 400 and (k % max(1, n_t // 50) == 0 or k == n_t - 1):
            ev = np.linalg.eigvalsh(V)[0]
            min_eig = min(min_eig, ev / max(1.0, np.abs(V).max()))

    record(0)
    n = 0
    for k in range(1, n_t):
        for _ in range(sub):
            state = [rho, y, V]
            if fundamental:
                state += [Phi, z]
            state += [G[a] for a in live]
            # replay the fluid solver's kink refinement so the means coincide
            if n in fluid.refined:
                for _ in range(KINK_SUBSTEPS):
                    state = _rk4(rhs, state, h / KINK_SUBSTEPS)
            else:
                state = _rk4(rhs, state, h)
            n += 1
            rho, y, V = state[0], state[1], 0.5 * (state[2] + state[2].T)
            rest = state[3:]
            if fundamental:
                Phi, z = rest[0], rest[1]
                rest = rest[2:]
            for a, g in zip(live, rest):
                G[a] = g
        record(k)

    if min_eig < -1e-9:
        raise CovarianceFault(f"covariance eigenvalue {min_eig:.3e} (relative) below -1e-9")
    anchors_out = {anchor_cols[k][0]: (anchor_cols[k][1], G_out[k]) for k in anchor_keys}
    return GaussianApprox(
        kind, config, fluid.times.copy(), mean_out, var_out, sig_out,
        V_out, Phi_out, logdet, anchors_out, min_eig, tot_out,
    )


def solve_covariance_rho(
    config: SegmentConfig,
    fluid: FluidTrajectory,
    store_full: bool = True,
    fundamental: bool = False,
    anchors: dict[float, Sequence[int]] | None = None,
) -> GaussianApprox:
    """Covariance of the density fluctuation along ``fluid``."""
    _check_config(config, fluid)
    return _integrate(fluid, "rho", store_full, fundamental, anchors)


def solve_covariance_y(
    config: SegmentConfig,
    fluid: FluidTrajectory,
    store_full: bool = True,
    fundamental: bool = False,
    anchors: dict[float, Sequence[int]] | None = None,
) -> GaussianApprox:
    """Covariance of the counting-process fluctuation along ``fluid``."""
    _check_config(config, fluid)
    return _integrate(fluid, "Y", store_full, fundamental, anchors)


def solve_fundamental(config: SegmentConfig, fluid: FluidTrajectory, kind: Kind = "rho") -> np.ndarray:
    """Phi(t_k) on the fluid grid, shape (n_t, D, D)."""
    _check_config(config, fluid)
    return _integrate(fluid, kind, False, True, None).Phi


def _check_config(config, fluid):
    if config is not fluid.config and config != fluid.config:
        raise ValueError("fluid trajectory was computed for a different configuration")


def cross_cov(approx: GaussianApprox, s: float, t: float) -> np.ndarray:
    """Gamma(s, t) = cov(x(s), x(t)) for grid times s <= t."""
    if s > t:
        raise ValueError("cross_cov needs s <= t")
    ks, kt = approx.index(s), approx.index(t)
    if approx.Phi is not None and approx.V is not None:
        # Psi(t, s)^T = Phi(s)^{-T} Phi(t)^T, by a solve against Phi(s)^T
        lu = scipy.linalg.lu_factor(approx.Phi[ks].T)
        psi_t = scipy.linalg.lu_solve(lu, approx.Phi[kt].T)
        return approx.V[ks] @ psi_t
    cols, G = approx.anchor(s)
    if cols.size != G.shape[1] or cols.size != approx.mean.shape[1]:
        raise ValueError("anchor does not cover every column; use cross_cov_entry")
    out = np.empty((cols.size, cols.size))
    out[cols, :] = G[kt].T
    return out


def cross_cov_entry(approx: GaussianApprox, s: float, t: float, index_s: int, index_t: int) -> float:
    """cov(x_{index_s}(s), x_{index_t}(t)) for s <= t."""
    try:
        cols, G = approx.anchor(s)
    except KeyError:
        return float(cross_cov(approx, s, t)[index_s, index_t])
    hit = np.flatnonzero(cols == index_s)
    if hit.size == 0:
        return float(cross_cov(approx, s, t)[index_s, index_t])
    return float(G[approx.index(t), index_t, hit[0]])
