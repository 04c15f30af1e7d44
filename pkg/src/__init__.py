"""
SpikingCSINet

A spiking-neural-network codec for massive-MIMO CSI feedback. The UT encodes
the channel into binary spike frames over T time steps, refining a residual
at every step; the BS decodes and accumulates the reconstruction.
"""

__version__ = "0.1.0"
__author__ = "Your Name"
__email__ = "your.email@example.com"

from .main import main
from .codec import SpikingCSINet, bs_reconstruct, estimate_lambda, feedback_bits, pr_feedback
from .config import RunConfig, Settings, get_app_settings, load_run_config, setup_logging
from .models import LambdaSchedule, ModelConfig, SystemConfig, TrainConfig
from .trainer import Trainer, evaluate

__all__ = [
    "main",
    "SpikingCSINet",
    "bs_reconstruct",
    "estimate_lambda",
    "feedback_bits",
    "pr_feedback",
    "RunConfig",
    "Settings",
    "get_app_settings",
    "load_run_config",
    "setup_logging",
    "LambdaSchedule",
    "ModelConfig",
    "SystemConfig",
    "TrainConfig",
    "Trainer",
    "evaluate",
]
