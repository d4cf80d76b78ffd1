"""Gram matrices and kernel dependence measures (HSIC, NOCCO).

All computation happens in float64 torch tensors so the results stay
differentiable and the NOCCO solve stays well conditioned.  Inputs are
sample-major: a batch is an ``(n, p)`` array (extra trailing dims are
flattened).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
import torch

DTYPE = torch.float64

# beyond ~1/machine-epsilon the solve carries no correct digits
MAX_CONDITION = 1.0 / np.finfo(np.float64).eps

Bandwidth = Union[float, Literal["median"]]


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelConfig:
    family: Literal["gaussian", "linear"] = "gaussian"
    bandwidth: Bandwidth = "median"
    nocco_reg: float = 1e-5

    def __post_init__(self):
        if self.family not in ("gaussian", "linear"):
            raise KernelError(f"unknown kernel family {self.family!r}")
        if self.bandwidth != "median":
            if not float(self.bandwidth) > 0:
                raise KernelError("bandwidth must be positive")
        if not self.nocco_reg > 0:
            raise KernelError("nocco_reg must be positive")


def _as_batch(batch) -> torch.Tensor:
    t = torch.as_tensor(batch)
    if t.ndim == 1:
        t = t[:, None]
    t = t.reshape(t.shape[0], -1)
    return t.to(DTYPE)


def _as_gram(K) -> torch.Tensor:
    K = torch.as_tensor(K).to(DTYPE)
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise KernelError(f"Gram matrix must be square, got shape {tuple(K.shape)}")
    return K


def _sq_dists(v: torch.Tensor) -> torch.Tensor:
    sq = (v * v).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (v @ v.T)
    d2 = d2.clamp_min(0.0)
    # exact zeros on the diagonal so the gaussian diagonal is exactly 1
    return d2 * (1.0 - torch.eye(len(v), dtype=v.dtype, device=v.device))


def median_bandwidth(batch) -> torch.Tensor:
    """Median of pairwise Euclidean distances over distinct pairs.

    Falls back to 1.0 when the median is zero (e.g. all points identical).
    The result keeps its autograd graph so objectives stay differentiable
    almost everywhere.
    """
    v = _as_batch(batch)
    n = len(v)
    if n < 2:
        raise KernelError("insufficient samples: median heuristic needs n >= 2")
    iu = torch.triu_indices(n, n, offset=1)
    d2 = _sq_dists(v)[iu[0], iu[1]]
    # clamp keeps sqrt differentiable at coincident points
    d = torch.sqrt(d2.clamp_min(1e-300))
    d = torch.where(d2 > 0, d, torch.zeros_like(d))
    med = torch.quantile(d, 0.5)
    if med.item() <= 0.0:
        return torch.ones((), dtype=DTYPE)
    return med


def gaussian_gram(batch, bandwidth: Bandwidth = "median") -> torch.Tensor:
    v = _as_batch(batch)
    if len(v) < 2:
        raise KernelError("insufficient samples: Gram matrix needs n >= 2")
    if bandwidth == "median":
        bw = median_bandwidth(v)
    else:
        bw = float(bandwidth)
        if not bw > 0:
            raise KernelError("bandwidth must be positive")
    return torch.exp(-_sq_dists(v) / (2.0 * bw * bw))


def linear_gram(batch) -> torch.Tensor:
    v = _as_batch(batch)
    if len(v) < 2:
        raise KernelError("insufficient samples: Gram matrix needs n >= 2")
    return v @ v.T


def gram(batch, cfg: KernelConfig = KernelConfig()) -> torch.Tensor:
    """Gram matrix of ``batch`` under ``cfg`` (gaussian or linear)."""
    if cfg.family == "linear":
        return linear_gram(batch)
    return gaussian_gram(batch, cfg.bandwidth)


def one_hot(labels, num_classes: int) -> torch.Tensor:
    labels = torch.as_tensor(labels, dtype=torch.long)
    return torch.nn.functional.one_hot(labels, num_classes).to(DTYPE)


def center(K) -> torch.Tensor:
    """H K H with H = I - 11^T / n, computed without forming H."""
    K = _as_gram(K)
    return K - K.mean(0, keepdim=True) - K.mean(1, keepdim=True) + K.mean()


def _check_pair(Kx, Kz):
    Kx, Kz = _as_gram(Kx), _as_gram(Kz)
    if Kx.shape != Kz.shape:
        raise KernelError(
            f"dimension mismatch: Gram shapes {tuple(Kx.shape)} and {tuple(Kz.shape)}"
        )
    if len(Kx) < 2:
        raise KernelError("insufficient samples: need n >= 2")
    return Kx, Kz


def hsic(Kx, Kz) -> torch.Tensor:
    """Trace estimator tr(Kx H Kz H) / (n-1)^2.

    Uses tr(Kx H Kz H) = <H Kx H, H Kz H>_F, which is symmetric in its
    arguments to the last bit.
    """
    Kx, Kz = _check_pair(Kx, Kz)
    n = len(Kx)
    return (center(Kx) * center(Kz)).sum() / (n - 1) ** 2


def normalized_gram(K, nocco_reg: float = 1e-5) -> torch.Tensor:
    """(HKH)(HKH + n eps I)^{-1}, the ridge-normalised centred Gram."""
    Kc = center(K)
    n = len(Kc)
    A = Kc + n * nocco_reg * torch.eye(n, dtype=DTYPE, device=Kc.device)
    if not bool(torch.isfinite(A).all()):
        # let the caller's finiteness check name the offending term
        return torch.full_like(Kc, float("nan"))
    cond = float(torch.linalg.cond(A.detach()))
    if not cond < MAX_CONDITION:
        raise KernelError(f"NOCCO solve is singular (condition number {cond:.3e}); increase nocco_reg")
    try:
        # Kc and A commute, so A^{-1} Kc == Kc A^{-1}
        return torch.linalg.solve(A, Kc)
    except torch.linalg.LinAlgError as exc:
        raise KernelError(
            f"NOCCO solve failed (condition number {cond:.3e}); increase nocco_reg"
        ) from exc


def nocco(Kx, Kz, nocco_reg: float = 1e-5) -> torch.Tensor:
    """Normalised cross-covariance dependence tr(K~x K~z), in [0, n]."""
    Kx, Kz = _check_pair(Kx, Kz)
    if not nocco_reg > 0:
        raise KernelError("nocco_reg must be positive")
    Nx = normalized_gram(Kx, nocco_reg)
    Nz = normalized_gram(Kz, nocco_reg)
    # both factors are symmetric up to round-off; trace of the product
    return (Nx * Nz.T).sum()
