"""Differentiable core and the measurement-domain autoencoder."""

from . import autodiff
from .checkpoint import load_checkpoint, save_checkpoint
from .model import (
    DEPTH_MAX,
    DEPTH_MIN,
    Model,
    ModelConfig,
    ParamSet,
    build_model,
    init_params,
    reinit_head,
)

__all__ = [
    "autodiff",
    "build_model",
    "init_params",
    "load_checkpoint",
    "reinit_head",
    "save_checkpoint",
    "DEPTH_MAX",
    "DEPTH_MIN",
    "Model",
    "ModelConfig",
    "ParamSet",
]
