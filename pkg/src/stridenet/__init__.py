"""Shifted-window transformer terrain classifier with a statistical roughness branch."""

__version__ = "0.1.0"

from .model import ModelConfig, SwinWeights, TOY_CONFIG, forward, init_weights, model_cost  # noqa: E402
from .roughness import RoughnessMap, roughness_map  # noqa: E402

__all__ = [
    "ModelConfig",
    "SwinWeights",
    "TOY_CONFIG",
    "RoughnessMap",
    "forward",
    "init_weights",
    "model_cost",
    "roughness_map",
]
