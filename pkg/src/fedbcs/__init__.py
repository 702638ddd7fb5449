"""Federated segmentation simulator with spectral style recalibration,
dual-level prototype alignment, and convergence diagnostics."""

from .checkpoint import (bytes_to_state, load_checkpoint, save_checkpoint,
                         state_bytes)
from .data import (DomainStyle, apply_style, default_styles, generate_domain,
                   make_federation_data)
from .federation import (FederationConfig, MetricsSink, TheoryParams,
                         descent_check, estimate_theory_params,
                         lambda_c_bound_convergence, lambda_c_bound_descent,
                         lr_upper_bound, rounds_to_epsilon, run_experiment,
                         run_reference_fedavg)
from .gradcheck import run_all as run_gradient_checks
from .losses import consis_loss, contra_loss, dice_loss, total_loss
from .network import SegNet, SegNetConfig
from .server import finch_cluster, run_server_round
from .spectral import FSRLayer, fft2, ifft2

__version__ = "0.1.0"

__all__ = [
    "DomainStyle", "FSRLayer", "FederationConfig", "MetricsSink", "SegNet",
    "SegNetConfig", "TheoryParams", "apply_style", "bytes_to_state",
    "consis_loss", "contra_loss", "default_styles", "descent_check",
    "dice_loss", "estimate_theory_params", "fft2", "finch_cluster",
    "generate_domain", "ifft2", "lambda_c_bound_convergence",
    "lambda_c_bound_descent", "load_checkpoint", "lr_upper_bound",
    "make_federation_data", "rounds_to_epsilon", "run_experiment",
    "run_gradient_checks", "run_reference_fedavg", "run_server_round",
    "save_checkpoint", "state_bytes", "total_loss",
]
