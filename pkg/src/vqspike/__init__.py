"""Spiking VQ autoencoder and absorbing-state discrete diffusion in numpy.

Set ``VQSPIKE_PURE_PYTHON=1`` before import to bypass the compiled kernels.
"""
from .config import Config, ConfigError
from .diffusion import SDID, DiffusionSchedule, SDIDConfig, diffusion_loss, forward_corrupt, sample
from .kernels import BACKEND
from .snn import LifParams, SpikingConv, SpikingLinear, run_spiking_layer
from .vqsvae import VQSVAE, VQSVAEConfig

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Config",
    "ConfigError",
    "DiffusionSchedule",
    "LifParams",
    "SDID",
    "SDIDConfig",
    "SpikingConv",
    "SpikingLinear",
    "VQSVAE",
    "VQSVAEConfig",
    "diffusion_loss",
    "forward_corrupt",
    "run_spiking_layer",
    "sample",
]
