"""Knowledge distillation for dense detection heads at desk scale.

The package bundles a float64 autograd engine, a synthetic scene generator,
instance-mask geometry, a toy anchor-free detection head, the category-anchor
distillation losses, and a training harness with a small CLI.
"""

from .autograd import (
    Tensor,
    conv2d,
    cosine_similarity,
    finite_difference_check,
    kl_divergence,
    masked_average_pool,
    relu,
    softmax_temperature,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "conv2d",
    "cosine_similarity",
    "finite_difference_check",
    "kl_divergence",
    "masked_average_pool",
    "relu",
    "softmax_temperature",
    "__version__",
]
