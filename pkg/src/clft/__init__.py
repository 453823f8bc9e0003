"""Camera-LiDAR fusion transformer for semantic segmentation, built on a small numpy autodiff engine."""

from .fusion import CLFT, ModelConfig, clft_forward
from .encoder import EncoderConfig, ViTEncoder
from .tensor import ConfigError, ShapeError, Tensor, no_grad

__all__ = ["CLFT", "ModelConfig", "clft_forward", "EncoderConfig", "ViTEncoder",
           "ConfigError", "ShapeError", "Tensor", "no_grad"]
__version__ = "0.1.0"
