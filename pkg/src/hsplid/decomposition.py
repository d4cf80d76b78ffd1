"""Saliency mask and the closed-form mask update.

The mask ``beta`` lives in [0, 1]^m.  ``beta`` scales the salient part of a
latent vector and ``1 - beta`` the non-salient part.  Masks are small numpy
float64 vectors; latent batches are sample-major ``(n, m)`` arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MaskError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class SaliencyMask:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64).reshape(-1)
        if beta.size and (np.isnan(beta).any() or beta.min() < 0 or beta.max() > 1):
            raise MaskError("mask entries must lie in [0, 1]")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @classmethod
    def ones(cls, m: int) -> "SaliencyMask":
        return cls(np.ones(m))

    def __len__(self):
        return self.beta.size

    def __eq__(self, other):
        return isinstance(other, SaliencyMask) and np.array_equal(self.beta, other.beta)

    @property
    def non_salient(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def salient_dim(self) -> int:
        """Count of entries strictly above 0.5."""
        return int(np.count_nonzero(self.beta > 0.5))

    def summary(self) -> dict:
        return {
            "s": self.salient_dim,
            "mean": float(self.beta.mean()),
            "min": float(self.beta.min()),
            "max": float(self.beta.max()),
        }


def split(z, mask: SaliencyMask):
    """Return ``(beta * z, (1 - beta) * z)`` along the last axis."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != len(mask):
        raise MaskError(f"dimension mismatch: latent dim {z.shape[-1]} vs mask {len(mask)}")
    z_n = z - mask.beta * z
    # recomputing z_s from z_n makes z_s + z_n == z hold bitwise
    return z - z_n, z_n


def scatter_stats(Z, labels):
    """Per-dimension within-class scatter ``a`` and global scatter ``b``.

    a_i = sum_k sum_{z in C_k} (z_i - mu_k,i)^2, b_i = sum_z (z_i - mu_i)^2.
    """
    Z = np.asarray(Z, dtype=np.float64)
    labels = np.asarray(labels)
    if Z.ndim != 2 or len(Z) == 0:
        raise MaskError("empty batch")
    if len(labels) != len(Z):
        raise MaskError("labels and latents differ in length")
    b = ((Z - Z.mean(0)) ** 2).sum(0)
    a = np.zeros(Z.shape[1])
    for k in np.unique(labels):
        Zk = Z[labels == k]
        a += ((Zk - Zk.mean(0)) ** 2).sum(0)
    return a, b


def mask_from_scatter(a, b, lambda_s: float, lambda_n: float) -> SaliencyMask:
    if lambda_s < 0 or lambda_n < 0 or lambda_s + lambda_n <= 0:
        raise MaskError("need lambda_s, lambda_n >= 0 with a positive sum")
    num = lambda_n * np.asarray(b, dtype=np.float64)
    den = lambda_s * np.asarray(a, dtype=np.float64) + num
    beta = np.full(num.shape, 0.5)
    ok = den > 0
    beta[ok] = num[ok] / den[ok]
    return SaliencyMask(np.clip(beta, 0.0, 1.0))


def closed_form_mask(Z, labels, lambda_s: float, lambda_n: float) -> SaliencyMask:
    """Exact minimiser of lambda_s * L_s + lambda_n * L_n over beta in [0,1]^m.

    Per dimension, beta_i = lambda_n b_i / (lambda_s a_i + lambda_n b_i).
    Dimensions with a zero denominator have a flat objective and get 0.5.
    """
    a, b = scatter_stats(Z, labels)
    return mask_from_scatter(a, b, lambda_s, lambda_n)


def mask_objective(beta, a, b, lambda_s, lambda_n) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    return float(lambda_s * (beta**2 * a).sum() + lambda_n * ((1 - beta) ** 2 * b).sum())


def update_mask_ema(old: SaliencyMask, new: SaliencyMask, beta_step: float) -> SaliencyMask:
    """beta <- beta_step * old + (1 - beta_step) * new."""
    if not 0.0 <= beta_step <= 1.0:
        raise MaskError("beta_step must lie in [0, 1]")
    if len(old) != len(new):
        raise MaskError("mask lengths differ")
    if beta_step == 1.0:
        return old
    if beta_step == 0.0:
        return new
    beta = beta_step * old.beta + (1.0 - beta_step) * new.beta
    return SaliencyMask(np.clip(beta, 0.0, 1.0))


def binarize(mask: SaliencyMask, threshold: float = 0.5) -> SaliencyMask:
    """Hard mask: 1 where beta > threshold, else 0 (ties go non-salient)."""
    return SaliencyMask((mask.beta > threshold).astype(np.float64))
