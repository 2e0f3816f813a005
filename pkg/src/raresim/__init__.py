"""Rare-event simulation for diffusions whose noise enters one subsystem of a chain.

Path sampling with counter-based noise, plain and importance-sampled
estimators, finite-difference HJB and exit-probability solvers, and a
minimum-action path optimiser.
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .model import (ChainSystem, DomainSpec, TerminalFunctional, ball_domain, box_domain, check_ellipticity,
                    diffusion_matrix, full_drift, noise_injection)
from .presets import builtin_models, get_preset
from .sde import sample_paths, simulate, simulate_controlled
from .estimators import (EstimateReport, delta_ratio, importance_sampled, log_efficiency_metric, plain_mc,
                         varadhan_check)
from .hjb import (ControlField, GridSpec, ValueField, duality_check, extract_control, hamiltonian, running_cost,
                  solve_exit_bvp, solve_hjb)
from .action import DiscretePath, ActionValue, action, asymptotic_comparison, blowup_probe, minimize_action

__all__ = [
    "ChainSystem", "DomainSpec", "TerminalFunctional", "box_domain", "ball_domain", "check_ellipticity",
    "diffusion_matrix", "full_drift", "noise_injection", "builtin_models", "get_preset", "sample_paths",
    "simulate", "simulate_controlled", "EstimateReport", "plain_mc", "importance_sampled", "delta_ratio",
    "log_efficiency_metric", "varadhan_check", "GridSpec", "ValueField", "ControlField", "hamiltonian",
    "running_cost", "duality_check", "solve_hjb", "solve_exit_bvp", "extract_control", "DiscretePath",
    "ActionValue", "action", "minimize_action", "blowup_probe", "asymptotic_comparison",
]
