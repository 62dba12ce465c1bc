"""Finite-difference simulation and pathwise diagnostics for the stochastic heat equation on [0, 1]."""

from .coeffs import CATALOG, CoefficientFn, CoefficientPair, RhoSpec, check_sg_lipschitz, sg
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .experiments import run_experiment
from .kernel import KernelSpec, green_eval, semigroup_apply
from .noise import GridSpec, NoiseGrid, SeedSpec, derive_seed, generate_noise
from .solver import Field, InitialCondition, PathBlowupError, SchemeConfig, fd_step, simulate_coupled, simulate_path

__version__ = "0.1.0"

__all__ = [
    "CATALOG",
    "CoefficientFn",
    "CoefficientPair",
    "ConfigError",
    "ExperimentConfig",
    "Field",
    "GridSpec",
    "InitialCondition",
    "KernelSpec",
    "NoiseGrid",
    "PathBlowupError",
    "RhoSpec",
    "SchemeConfig",
    "SeedSpec",
    "check_sg_lipschitz",
    "derive_seed",
    "fd_step",
    "generate_noise",
    "green_eval",
    "load_config",
    "parse_config",
    "run_experiment",
    "semigroup_apply",
    "sg",
    "simulate_coupled",
    "simulate_path",
]
