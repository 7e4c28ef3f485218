"""Recurrent U-Net segmentation engine with its own autodiff core.

Subpackage map: `tensor`/`ops`/`gradcheck` (autodiff core), `blocks`
(U-Net pieces), `recurrent` (gated units, baselines, driver), `training`
(loss schedule, Adam, checkpoints), `data`/`metrics` (ingestion,
synthetic tasks, evaluation), `cli` (command-line verbs).
"""

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig
from .tensor import (
    ConfigError,
    NumericsError,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "ShapeError",
    "ConfigError",
    "NumericsError",
    "ModelConfig",
    "TrainConfig",
    "DataConfig",
    "RunConfig",
    "__version__",
]
