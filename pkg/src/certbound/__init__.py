"""Certified robustness bounds for small fully-connected ReLU classifiers."""

from .bounds import (
    BoundState,
    LinearRelaxation,
    PerturbationSpec,
    certify,
    crown_certify,
    fastlin_certify,
    ibp_bounds,
    ibp_certify,
    optimal_input_perturbation,
    optimal_intercepts,
)
from .model import MarginSpec, Network, forward, load, margin, save, toy_network

__all__ = [
    "BoundState",
    "LinearRelaxation",
    "MarginSpec",
    "Network",
    "PerturbationSpec",
    "certify",
    "crown_certify",
    "fastlin_certify",
    "forward",
    "ibp_bounds",
    "ibp_certify",
    "load",
    "margin",
    "optimal_input_perturbation",
    "optimal_intercepts",
    "save",
    "toy_network",
]
