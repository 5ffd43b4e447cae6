"""CrossDiff: cross-conditional diffusion segmentation for slender cracks,
with ensemble STAPLE fusion, a label-propagation oracle, and an
IoU/Dice evaluation harness."""

from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
