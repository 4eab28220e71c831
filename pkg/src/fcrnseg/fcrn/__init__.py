"""Fully convolutional residual network: config, kernels, training primitives."""
from .config import (ConvSpec, NetworkConfig, StageSchedule, StageSpec, compute_fov,
                     output_size, rebase_strides)
from .network import (ParamStore, backward, forward, init_params, load_checkpoint,
                      save_checkpoint, sgd_step)

__all__ = [
    "ConvSpec", "NetworkConfig", "StageSchedule", "StageSpec", "compute_fov", "output_size",
    "rebase_strides", "ParamStore", "backward", "forward", "init_params", "load_checkpoint",
    "save_checkpoint", "sgd_step",
]
