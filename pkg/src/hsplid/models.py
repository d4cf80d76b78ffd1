"""Encoder + linear head networks and input-gradient utilities.

``SaliencyNet`` holds an encoder ``f`` and a bias-free linear head ``W``.
When a mask is attached the head sees ``beta * f(x)``; otherwise ``f(x)``.

Reference encoders
------------------
``lenet3`` (1x64x64 input)::

    conv(1->6, 5x5) -> ReLU -> maxpool 2
    conv(6->16, 5x5) -> ReLU -> maxpool 2
    flatten (16*13*13 = 2704) -> linear(2704->1024) -> ReLU     # latent
    head: linear(1024->k), no bias

Parameter count with k=10: 2_782_732.

``mlp_small``: flatten -> linear(d->64) -> act -> linear(64->m) -> act, head
linear(m->k).  ``act`` is ReLU by default; tanh is available for smooth
finite-difference checks.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .decomposition import SaliencyMask

ARCHITECTURES = ("mlp_small", "lenet3")


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str = "lenet3"
    input_shape: Sequence[int] = (1, 64, 64)
    latent_dim: int = 1024
    num_classes: int = 10
    hidden: int = 64
    activation: str = "relu"

    def __post_init__(self):
        if self.name not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.name!r}")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "latent_dim": self.latent_dim,
            "num_classes": self.num_classes,
            "hidden": self.hidden,
            "activation": self.activation,
        }


def _act(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.Tanh()


def lenet3_encoder(input_shape, latent_dim: int = 1024, activation: str = "relu") -> nn.Sequential:
    c, h, w = input_shape
    h2, w2 = ((h - 4) // 2 - 4) // 2, ((w - 4) // 2 - 4) // 2
    return nn.Sequential(
        nn.Conv2d(c, 6, 5),
        _act(activation),
        nn.MaxPool2d(2),
        nn.Conv2d(6, 16, 5),
        _act(activation),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(16 * h2 * w2, latent_dim),
        _act(activation),
    )


def mlp_encoder(input_shape, latent_dim: int, hidden: int = 64, activation: str = "relu") -> nn.Sequential:
    d = int(np.prod(input_shape))
    return nn.Sequential(
        nn.Flatten(),
        nn.Linear(d, hidden),
        _act(activation),
        nn.Linear(hidden, latent_dim),
        _act(activation),
    )


class SaliencyNet(nn.Module):
    def __init__(self, encoder: nn.Module, latent_dim: int, num_classes: int,
                 arch: Optional[ArchitectureSpec] = None):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(latent_dim, num_classes, bias=False)
        self.arch = arch
        self.latent_dim = latent_dim
        self.num_classes = num_classes
        self.register_buffer("beta", None)

    @property
    def input_shape(self):
        return None if self.arch is None else self.arch.input_shape

    def attach_mask(self, mask):
        beta = mask.beta if isinstance(mask, SaliencyMask) else mask
        p = next(self.parameters())
        self.beta = torch.as_tensor(np.array(beta), dtype=p.dtype, device=p.device).clone()
        return self

    def detach_mask(self):
        self.beta = None
        return self

    @property
    def mask(self) -> Optional[SaliencyMask]:
        if self.beta is None:
            return None
        return SaliencyMask(self.beta.detach().cpu().double().numpy())

    def _check_input(self, x: torch.Tensor):
        shape = self.input_shape
        if shape is not None and tuple(x.shape[1:]) != tuple(shape):
            raise ValueError(f"shape mismatch: expected (*, {shape}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x)

    def logits_from_latent(self, z: torch.Tensor) -> torch.Tensor:
        if self.beta is not None:
            z = z * self.beta
        return self.head(z)

    def forward(self, x: torch.Tensor):
        z = self.encode(x)
        return z, self.logits_from_latent(z)


def build_model(arch: ArchitectureSpec, seed: Optional[int] = None) -> SaliencyNet:
    if seed is not None:
        torch.manual_seed(seed)
    if arch.name == "lenet3":
        enc = lenet3_encoder(arch.input_shape, arch.latent_dim, arch.activation)
    else:
        enc = mlp_encoder(arch.input_shape, arch.latent_dim, arch.hidden, arch.activation)
    return SaliencyNet(enc, arch.latent_dim, arch.num_classes, arch)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: SaliencyNet, x):
    """``(z, logits)`` for ``x`` (a batch)."""
    p = next(model.parameters())
    x = torch.as_tensor(x, dtype=p.dtype, device=p.device)
    return model(x)


def logits(model: SaliencyNet, x) -> torch.Tensor:
    return forward(model, x)[1]


def input_gradient(model: SaliencyNet, x, target: str = "loss", y=None, j: Optional[int] = None) -> torch.Tensor:
    """Gradient of a scalar target w.r.t. the inputs, shaped like ``x``.

    ``target``: ``"loss"`` (summed cross-entropy against ``y``; per-sample
    gradients since samples do not interact), ``"logit"`` (sum of logit
    ``j``), or ``"output_frobenius"`` which returns the per-sample Jacobian
    Frobenius norm instead of a gradient.
    """
    if target == "output_frobenius":
        return jacobian_frobenius(model, x)
    p = next(model.parameters())
    x = torch.as_tensor(x, dtype=p.dtype, device=p.device).detach().requires_grad_(True)
    out = model(x)[1]
    if target == "loss":
        y = torch.as_tensor(y, dtype=torch.long, device=out.device)
        scalar = nn.functional.cross_entropy(out, y, reduction="sum")
    elif target == "logit":
        scalar = out[:, j].sum()
    else:
        raise ValueError(f"unknown target {target!r}")
    (g,) = torch.autograd.grad(scalar, x, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


def jacobian_frobenius(model: SaliencyNet, x) -> torch.Tensor:
    """Per-sample ||d h(x) / d x||_F via one reverse pass per output."""
    p = next(model.parameters())
    x = torch.as_tensor(x, dtype=p.dtype, device=p.device).detach().requires_grad_(True)
    out = model(x)[1]
    sq = torch.zeros(len(x), dtype=x.dtype, device=x.device)
    for j in range(out.shape[1]):
        (g,) = torch.autograd.grad(out[:, j].sum(), x, retain_graph=True, allow_unused=True)
        if g is not None:
            sq = sq + (g.reshape(len(x), -1) ** 2).sum(1)
    return sq.sqrt().detach()


def output_hash(model: SaliencyNet, x) -> str:
    with torch.no_grad():
        out = logits(model, x).detach().cpu().numpy()
    return hashlib.sha256(np.ascontiguousarray(out).tobytes()).hexdigest()


@torch.no_grad()
def encode_all(model: SaliencyNet, images, batch_size: int = 256) -> np.ndarray:
    """Latents for a stack of images, evaluation mode, float64 numpy."""
    was_training = model.training
    model.eval()
    p = next(model.parameters())
    out = []
    for i in range(0, len(images), batch_size):
        xb = torch.as_tensor(images[i:i + batch_size], dtype=p.dtype, device=p.device)
        out.append(model.encode(xb).double().cpu().numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, model.latent_dim))
    return np.concatenate(out)


@torch.no_grad()
def predict(model: SaliencyNet, images, batch_size: int = 256) -> np.ndarray:
    was_training = model.training
    model.eval()
    p = next(model.parameters())
    preds = []
    for i in range(0, len(images), batch_size):
        xb = torch.as_tensor(images[i:i + batch_size], dtype=p.dtype, device=p.device)
        preds.append(model(xb)[1].argmax(1).cpu().numpy())
    model.train(was_training)
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
