"""Few-step flow-matching speech restoration with data-prediction mean flows, at desk scale."""
from .dsp import StftConfig
from .flowcore import FlowConfig
from .model import ModelConfig, build_model
from .sampler import SamplerConfig, euler_sample, restore
from .training import TrainConfig, Trainer

__all__ = [
    "StftConfig", "FlowConfig", "ModelConfig", "SamplerConfig", "TrainConfig", "Trainer",
    "build_model", "euler_sample", "restore",
]
__version__ = "0.1.0"
