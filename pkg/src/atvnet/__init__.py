"""Adaptive triple-view segmentation network in numpy."""
from .model import (ATVNetParams, BackboneConfig, ModelConfig, build_model,
                    model_backward, model_forward, predict)

__version__ = "0.1.0"
