"""Multi-modal state tracking with two-stage latent graph mixing."""

from .config import (
    ChannelDef,
    ModalityDef,
    ModelConfig,
    RunConfig,
    TaskSpec,
    TrainConfig,
    run_config_from_dict,
    run_config_to_dict,
)
from .numeric import ParamStore, Tensor, finite_difference_gradients

__version__ = "0.1.0"

__all__ = [
    "ChannelDef",
    "ModalityDef",
    "ModelConfig",
    "ParamStore",
    "RunConfig",
    "TaskSpec",
    "Tensor",
    "TrainConfig",
    "finite_difference_gradients",
    "run_config_from_dict",
    "run_config_to_dict",
    "__version__",
]
