"""Salient / non-salient latent decomposition with kernel independence penalties."""
from .decomposition import SaliencyMask, binarize, closed_form_mask, split, update_mask_ema
from .kernels import KernelConfig, gaussian_gram, hsic, linear_gram, nocco
from .models import ArchitectureSpec, SaliencyNet, build_model

__version__ = "0.1.0"

__all__ = [
    "ArchitectureSpec",
    "KernelConfig",
    "SaliencyMask",
    "SaliencyNet",
    "binarize",
    "build_model",
    "closed_form_mask",
    "gaussian_gram",
    "hsic",
    "linear_gram",
    "nocco",
    "split",
    "update_mask_ema",
]
