"""Kernel-weighted differencing for dyadic panels with sample selection."""

from .data import DifferencedSample, DyadicPanel, PanelError, difference, load_panel, save_panel
from .estimator import SingularMomentsError, fixed_effect_beta, kernel_weighted_beta, ppml_beta
from .first_step import FirstStepError, SeparationError, fit_conditional_logit
from .inference import InferenceConfig, InferenceFit, run_inference_procedure
from .kernels import BIWEIGHT, get_kernel, verify_kernel_order
from .montecarlo import DgpConfig, run_monte_carlo, simulate_panel

__version__ = "0.1.0"

__all__ = [
    "BIWEIGHT",
    "DgpConfig",
    "DifferencedSample",
    "DyadicPanel",
    "FirstStepError",
    "InferenceConfig",
    "InferenceFit",
    "PanelError",
    "SeparationError",
    "SingularMomentsError",
    "difference",
    "fit_conditional_logit",
    "fixed_effect_beta",
    "get_kernel",
    "kernel_weighted_beta",
    "load_panel",
    "ppml_beta",
    "run_inference_procedure",
    "run_monte_carlo",
    "save_panel",
    "simulate_panel",
    "verify_kernel_order",
]
