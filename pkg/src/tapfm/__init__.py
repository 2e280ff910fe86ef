"""Detached dual-graph task adaptation of a small ViT under multiple instance learning."""

from .autograd import Graph, Value, detach
from .trainer import ModelState, TrainConfig, tapfm_step, train
from .vit import TOY_CONFIG, ViTConfig

__version__ = "0.1.0"

__all__ = ["Graph", "Value", "detach", "ModelState", "TrainConfig", "tapfm_step", "train",
           "ViTConfig", "TOY_CONFIG", "__version__"]
