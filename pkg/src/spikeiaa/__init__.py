"""Spike-train tokenization, interval-area attention encoder, and pretraining harness."""

from .config import FinetuneConfig, ModelConfig, RunConfig, TrainConfig
from .numerics import get_dtype, precision, set_dtype

__all__ = ["FinetuneConfig", "ModelConfig", "RunConfig", "TrainConfig",
           "get_dtype", "precision", "set_dtype"]
__version__ = "0.1.0"
