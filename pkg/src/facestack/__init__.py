"""Multi-identity diffusion conditioning at desk scale.

Core pieces: a float64 tensor substrate with handwritten reverse-mode
gradients, the multimodal embedding stack, binary mask pyramids, masked
cross-attention, a pose-controlled toy denoiser, and identity-preservation
metrics. Everything is deterministic under explicit seeds.
"""

from .config import Config
from .tensor import Tensor, constant, leaf, backward, grad_check

__all__ = ["Config", "Tensor", "constant", "leaf", "backward", "grad_check"]
__version__ = "0.1.0"
