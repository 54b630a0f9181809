"""MicroISP: a compact three-branch network mapping packed Bayer RAW to RGB.

Pure numpy implementation of the model, its training loop, a memory-planned
inference executor and the RAW/RGB file formats around it.
"""

from .errors import ConfigError, ContractError, FormatError, MicroISPError, TrainingError
from .executor import benchmark, build_plan, count_flops, execute, replay_plan
from .metrics import evaluate_dataset, psnr, ssim_metric
from .model import (MicroISPModel, ModelConfig, build_model, forward, load_weights,
                    param_count, save_weights)
from .training import TrainingSchedule, gradcheck, train_loop

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "FormatError", "MicroISPError", "TrainingError",
    "MicroISPModel", "ModelConfig", "TrainingSchedule",
    "benchmark", "build_model", "build_plan", "count_flops", "evaluate_dataset", "execute",
    "forward", "gradcheck", "load_weights", "param_count", "psnr", "replay_plan",
    "save_weights", "ssim_metric", "train_loop",
]
