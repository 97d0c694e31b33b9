"""Desk-scale semi-supervised learning laboratory.

A numpy-backed training stack: a small reverse-mode autodiff engine,
pre-activation residual networks with feature-perturbation hook points,
image- and feature-level augmentation operators, pluggable confidence
thresholds, and a triple-branch consistency trainer with confidence-based
identification of naive samples.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad", "__version__"]
