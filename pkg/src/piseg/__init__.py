"""U-shaped segmentation network built from parallel window-attention and
depth-wise-convolution blocks, on a small numpy reverse-mode autodiff engine."""

from .model import ModelConfig, ParameterStore, build, forward, load, save
from .tensor import Tensor, backward, no_grad

__all__ = ["ModelConfig", "ParameterStore", "Tensor", "backward", "build", "forward", "load", "no_grad", "save"]
__version__ = "0.1.0"
