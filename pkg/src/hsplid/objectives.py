"""Loss terms of the H-SPLID objective and the baseline regularizers.

Everything here takes and returns torch tensors so the terms can be
backpropagated.  Latents are ``(n, m)``; ``beta`` is a length-``m`` tensor
(or a :class:`~hsplid.decomposition.SaliencyMask`) treated as a constant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Literal, Optional

import torch
import torch.nn.functional as F

from .decomposition import SaliencyMask
from .kernels import DTYPE, KernelConfig, gaussian_gram, gram, hsic, linear_gram, nocco, one_hot


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    lambda_ce: float = 10.0
    lambda_s: float = 0.1
    lambda_n: float = 0.2
    rho_s: float = 0.5
    rho_n: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")

    @classmethod
    def ce_only(cls, lambda_ce: float = 10.0) -> "LossWeights":
        return cls(lambda_ce, 0.0, 0.0, 0.0, 0.0)


BASELINE_KINDS = (
    "none",
    "weight_decay",
    "l1_weights",
    "group_lasso_weights",
    "l1_activations",
    "group_lasso_activations",
    "hbar",
)


@dataclass(frozen=True)
class BaselineRegSpec:
    kind: str = "none"
    strength: float = 0.0
    # HBaR only
    lambda_x: float = 0.0
    lambda_y: float = 0.0
    sigma: float = 5.0

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline regularizer {self.kind!r}")
        if min(self.strength, self.lambda_x, self.lambda_y) < 0 or self.sigma <= 0:
            raise ValueError("regularizer strengths must be nonnegative")


TERMS = ("ce", "L_s", "L_n", "hsic_x_zs", "hsic_y_zn", "baseline_reg")


@dataclass
class LossBreakdown:
    ce: object = 0.0
    L_s: object = 0.0
    L_n: object = 0.0
    hsic_x_zs: object = 0.0
    hsic_y_zn: object = 0.0
    baseline_reg: object = 0.0
    total: object = 0.0

    def as_floats(self) -> dict:
        return {f.name: float(_item(getattr(self, f.name))) for f in fields(self)}


def _item(v):
    return v.detach() if torch.is_tensor(v) else v


def _beta_tensor(beta, like: torch.Tensor) -> torch.Tensor:
    if isinstance(beta, SaliencyMask):
        beta = beta.beta
    return torch.as_tensor(beta, dtype=like.dtype, device=like.device).detach()


def masked_cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean categorical cross-entropy of logits computed from masked latents."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=logits.device)
    k = logits.shape[-1]
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    return F.cross_entropy(logits, labels)


def class_centroids(z: torch.Tensor, labels, num_classes: Optional[int] = None):
    """Return ``(mu_k per sample, mu)``: each sample's class centroid and the global one."""
    labels = torch.as_tensor(labels, dtype=torch.long, device=z.device)
    k = int(num_classes if num_classes is not None else labels.max().item() + 1)
    sums = torch.zeros(k, z.shape[1], dtype=z.dtype, device=z.device).index_add(0, labels, z)
    counts = torch.bincount(labels, minlength=k).to(z.dtype).clamp_min(1.0)
    mu_k = sums / counts[:, None]
    return mu_k[labels], z.mean(0)


def clustering_losses(z: torch.Tensor, labels, beta, normalize: bool = False):
    """Masked within-class compactness ``L_s`` and global alignment ``L_n``.

    L_s = sum_k sum_{i in C_k} ||beta * (z_i - mu_k)||^2
    L_n = sum_i ||(1 - beta) * (z_i - mu)||^2

    Centroids come from this batch.  ``normalize`` divides both by n.
    """
    b = _beta_tensor(beta, z)
    mu_i, mu = class_centroids(z, labels)
    L_s = ((b * (z - mu_i)) ** 2).sum()
    L_n = (((1 - b) * (z - mu)) ** 2).sum()
    if normalize:
        L_s, L_n = L_s / len(z), L_n / len(z)
    return L_s, L_n


def dependence(Kx, Kz, mode: str, nocco_reg: float) -> torch.Tensor:
    if mode == "nocco":
        return nocco(Kx, Kz, nocco_reg)
    if mode == "hsic":
        return hsic(Kx, Kz)
    raise ValueError(f"unknown dependence mode {mode!r}")


def hsplid_penalties(
    x,
    z: torch.Tensor,
    labels,
    beta,
    num_classes: int,
    kcfg: KernelConfig = KernelConfig(),
    mode: Literal["nocco", "hsic"] = "nocco",
):
    """Dependence of the salient latents on the inputs and of the
    non-salient latents on the labels.

    Returns ``(dep(X, beta*Z), dep(Y, (1-beta)*Z))`` where inputs and latents
    use ``kcfg`` and labels use a linear kernel on one-hot codes.  Values are
    clipped at zero against round-off.
    """
    b = _beta_tensor(beta, z)
    zd = z.to(DTYPE)
    bd = b.to(DTYPE)
    Kx = gram(torch.as_tensor(x), kcfg)
    Kzs = gram(bd * zd, kcfg)
    Ky = linear_gram(one_hot(labels, num_classes))
    Kzn = gram((1 - bd) * zd, kcfg)
    h_x = dependence(Kx, Kzs, mode, kcfg.nocco_reg).clamp_min(0.0)
    h_y = dependence(Ky, Kzn, mode, kcfg.nocco_reg).clamp_min(0.0)
    return h_x, h_y


def weight_tensors(params: Iterable[torch.Tensor]):
    """Weights (ndim >= 2) from a parameter iterable; biases are skipped."""
    return [p for p in params if p.ndim >= 2]


def baseline_regularizer(
    params: Iterable[torch.Tensor],
    activations: Optional[torch.Tensor],
    spec: BaselineRegSpec,
    x=None,
    labels=None,
    num_classes: Optional[int] = None,
    nocco_reg: float = 1e-5,
) -> torch.Tensor:
    """Strength-weighted comparison regularizer.

    Weight penalties run over every parameter with ndim >= 2; group-lasso
    groups are output neurons (first axis).  Activation penalties average
    over the batch.  ``hbar`` is signed: it rewards label dependence.
    """
    kind = spec.kind
    if kind == "none":
        return torch.zeros((), dtype=DTYPE)
    if kind in ("weight_decay", "l1_weights", "group_lasso_weights"):
        ws = weight_tensors(params)
        if not ws:
            return torch.zeros((), dtype=DTYPE)
        if kind == "weight_decay":
            val = sum((w**2).sum() for w in ws)
        elif kind == "l1_weights":
            val = sum(w.abs().sum() for w in ws)
        else:
            val = sum(w.reshape(w.shape[0], -1).norm(dim=1).sum() for w in ws)
        return spec.strength * val
    if activations is None:
        raise ValueError(f"{kind} needs penultimate activations")
    a = activations.reshape(len(activations), -1)
    if kind == "l1_activations":
        return spec.strength * a.abs().sum(1).mean()
    if kind == "group_lasso_activations":
        return spec.strength * a.norm(dim=1).mean()
    # hbar
    if x is None or labels is None or num_classes is None:
        raise ValueError("hbar needs inputs, labels and num_classes")
    Kz = gaussian_gram(a.to(DTYPE), spec.sigma)
    Kx = gaussian_gram(torch.as_tensor(x), spec.sigma)
    Ky = linear_gram(one_hot(labels, num_classes))
    return spec.lambda_x * nocco(Kx, Kz, nocco_reg) - spec.lambda_y * nocco(Ky, Kz, nocco_reg)


def total_objective(parts: dict, weights: LossWeights) -> LossBreakdown:
    """Weighted sum of the loss components in ``parts``.

    ``parts`` maps term names in :data:`TERMS` to scalars or tensors; missing
    terms count as zero.  The baseline term enters unweighted (its strength
    is already applied).
    """
    vals = {}
    for name in TERMS:
        v = parts.get(name, 0.0)
        fv = float(_item(v))
        if not math.isfinite(fv):
            raise NonFiniteLossError(name, fv)
        vals[name] = v.to(DTYPE) if torch.is_tensor(v) else v
    coef = {
        "ce": weights.lambda_ce,
        "L_s": weights.lambda_s,
        "L_n": weights.lambda_n,
        "hsic_x_zs": weights.rho_s,
        "hsic_y_zn": weights.rho_n,
        "baseline_reg": 1.0,
    }
    total = 0.0
    for name in TERMS:
        if coef[name] != 0.0:
            total = total + coef[name] * vals[name]
    return LossBreakdown(total=total, **vals)
