"""Similarity-volume aggregation for open-vocabulary video classification."""

from .config import Config, DataConfig, ModelConfig, TrainConfig, load_config
from .model import SimVA, build_model, param_count
from .store import ParameterStore

__all__ = ["Config", "DataConfig", "ModelConfig", "TrainConfig", "load_config",
           "SimVA", "build_model", "param_count", "ParameterStore"]
__version__ = "0.1.0"
