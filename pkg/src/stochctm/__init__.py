"""Stochastic multi-class cell transmission model.

Exact Markov-jump simulation of vehicle counts on a segment of cells, plus
its fluid (ODE) and diffusion (Gaussian) approximations and the travel-time
distributions that follow from the counting processes.
"""

from .flux import (
    CBParams,
    ChanutBuissonFlux,
    DaganzoFlux,
    DaganzoParams,
    FluxModel,
    cb_flux,
    daganzo_flux,
    flux_gradient,
    inflow_cap,
    outflow_cap,
)
from .model import SegmentConfig, assemble_rates, drift, drift_jacobian, structure_matrices
from .fluid import FluidTrajectory, godunov, godunov_step, solve_fluid
from .diffusion import GaussianApprox, cross_cov, solve_covariance_rho, solve_covariance_y, solve_fundamental
from .ctmc import MomentEstimate, Trajectory, replicate, simulate_path
from .traveltime import TravelTimeDistribution, TravelTimeQuery, quantile, travel_time_cdf, travel_time_pdf

__version__ = "0.1.0"

__all__ = [
    "CBParams", "ChanutBuissonFlux", "DaganzoFlux", "DaganzoParams", "FluxModel",
    "cb_flux", "daganzo_flux", "flux_gradient", "inflow_cap", "outflow_cap",
    "SegmentConfig", "assemble_rates", "drift", "drift_jacobian", "structure_matrices",
    "FluidTrajectory", "godunov", "godunov_step", "solve_fluid",
    "GaussianApprox", "cross_cov", "solve_covariance_rho", "solve_covariance_y", "solve_fundamental",
    "MomentEstimate", "Trajectory", "replicate", "simulate_path",
    "TravelTimeDistribution", "TravelTimeQuery", "quantile", "travel_time_cdf", "travel_time_pdf",
]
