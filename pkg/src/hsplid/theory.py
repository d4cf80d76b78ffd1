"""Numerical companions to the robustness bound.

The bound controls the expected output deviation under an L2 input
perturbation of radius ``r`` for inputs drawn from a truncated isotropic
Gaussian::

    E ||h(x + d) - h(x)||  <=  r R B sqrt(k s) (L R + ||f(0)||) HSIC / (sigma^2 K)

``K`` stands for the product of kernel suprema, which has no numeric value
in general; it is exposed as ``kernel_sup_product`` (default 1) so the
right-hand side is a *bound with estimated constants*, not a certificate.
``L`` is an empirical lower estimate of the encoder Lipschitz constant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.stats import chi2

from .decomposition import SaliencyMask, binarize
from .kernels import KernelConfig, gram, hsic
from .models import SaliencyNet, jacobian_frobenius

MIN_ACCEPTANCE = 1e-4


class TheoryError(ValueError):
    pass


@dataclass(frozen=True)
class TmvnConfig:
    dim: int
    sigma: float = 0.25
    radius: float = 17.0
    n_samples: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.radius > 0 or not self.sigma > 0:
            raise TheoryError("radius and sigma must be positive")
        if self.dim < 1 or self.n_samples < 0:
            raise TheoryError("dim must be >= 1 and n_samples >= 0")

    @property
    def acceptance(self) -> float:
        """Probability that an untruncated draw lands inside the ball."""
        return float(chi2.cdf((self.radius / self.sigma) ** 2, self.dim))


@dataclass(frozen=True)
class BoundConstants:
    R: float
    sigma2: float
    L: float
    B: float
    s: int
    k: int
    f0_norm: float
    kernel_sup_product: float = 1.0
    m: Optional[int] = None

    def __post_init__(self):
        for name in ("R", "sigma2", "L", "B", "s", "k", "f0_norm", "kernel_sup_product"):
            if not getattr(self, name) >= 0:
                raise TheoryError(f"{name} must be nonnegative")
        if self.m is not None and self.s > self.m:
            raise TheoryError("s exceeds latent dimension")

    def to_dict(self) -> dict:
        return asdict(self)


def sample_tmvn(cfg: TmvnConfig, batch: int = 4096) -> np.ndarray:
    """Draws from N(0, sigma^2 I) conditioned on ||x|| <= R, by rejection."""
    p = cfg.acceptance
    if p < MIN_ACCEPTANCE:
        raise TheoryError(f"tMVN acceptance rate {p:.3g} < {MIN_ACCEPTANCE}; increase the radius")
    rng = np.random.default_rng(cfg.seed)
    out, have = [], 0
    while have < cfg.n_samples:
        need = cfg.n_samples - have
        size = min(max(batch, int(need / p * 1.2) + 1), max(batch, 10 * need))
        x = rng.normal(0.0, cfg.sigma, size=(size, cfg.dim))
        keep = x[np.linalg.norm(x, axis=1) <= cfg.radius][:need]
        out.append(keep)
        have += len(keep)
    return np.concatenate(out) if out else np.zeros((0, cfg.dim))


def _to_input(model: SaliencyNet, flat) -> torch.Tensor:
    p = next(model.parameters())
    x = torch.as_tensor(np.asarray(flat), dtype=p.dtype, device=p.device)
    shape = model.input_shape
    return x.reshape(len(x), *shape) if shape is not None else x


@torch.no_grad()
def _encode(model: SaliencyNet, flat) -> torch.Tensor:
    return model.encode(_to_input(model, flat)).double().reshape(len(flat), -1)


def lipschitz_lower(model: SaliencyNet, samples: np.ndarray, pairs: int = 10_000, seed: int = 0,
                    local_scale: float = 1e-3, batch: int = 500, ascent_anchors: int = 32,
                    ascent_steps: int = 10) -> float:
    """Max of ||f(x) - f(x')|| / ||x - x'|| over sampled pairs.

    Half the pairs are random sample pairs, half are local pairs
    ``(x, x + h u)`` with ``u`` a random unit direction.  A further
    ``ascent_anchors`` local pairs have their direction refined by gradient
    ascent on the difference quotient (a power iteration on the Jacobian).
    Every candidate is an actual input pair, so the result is a lower
    estimate of the true constant.
    """
    n, d = samples.shape
    if n == 0 or pairs <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    h = local_scale * max(float(np.linalg.norm(samples, axis=1).mean()), 1.0)
    best = 0.0
    n_far = pairs // 2 if n > 1 else 0
    for start in range(0, pairs, batch):
        m = min(batch, pairs - start)
        idx = rng.integers(0, n, size=m)
        a = samples[idx]
        if start < n_far:
            b = samples[(idx + rng.integers(1, max(n, 2), size=m)) % n]
        else:
            u = rng.normal(size=(m, d))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            b = a + h * u
        dx = np.linalg.norm(a - b, axis=1)
        ok = dx > 0
        if not ok.any():
            continue
        dz = (_encode(model, a[ok]) - _encode(model, b[ok])).norm(dim=1).cpu().numpy()
        best = max(best, float((dz / dx[ok]).max()))
    if ascent_anchors > 0:
        best = max(best, _ascent_quotient(model, samples[rng.integers(0, n, size=min(ascent_anchors, n))],
                                          h, ascent_steps, rng))
    return best


def _ascent_quotient(model: SaliencyNet, anchors: np.ndarray, h: float, steps: int, rng) -> float:
    was_training = model.training
    model.eval()
    x = torch.as_tensor(anchors, dtype=torch.float64)
    with torch.no_grad():
        f0 = _encode_grad(model, x)
    u = _sphere(rng, len(x), x.shape[1], 1.0)
    best = 0.0
    for _ in range(steps + 1):
        u = u.detach().requires_grad_(True)
        q = (_encode_grad(model, x + h * u) - f0).norm(dim=1) / h
        best = max(best, float(q.detach().max()))
        (g,) = torch.autograd.grad(q.sum(), u)
        gn = g.norm(dim=1, keepdim=True)
        if not bool((gn > 0).any()):
            break
        u = torch.where(gn > 0, g / gn.clamp_min(1e-300), u.detach())
    model.train(was_training)
    return best


def _encode_grad(model: SaliencyNet, flat: torch.Tensor) -> torch.Tensor:
    x = flat.to(next(model.parameters()).dtype)
    shape = model.input_shape
    if shape is not None:
        x = x.reshape(len(x), *shape)
    return model.encode(x).double().reshape(len(x), -1)


def estimate_constants(model: SaliencyNet, mask: Optional[SaliencyMask], cfg: TmvnConfig,
                       pairs: int = 10_000, kernel_sup_product: float = 1.0,
                       samples: Optional[np.ndarray] = None) -> BoundConstants:
    if samples is None:
        samples = sample_tmvn(cfg)
    if mask is None:
        mask = SaliencyMask.ones(model.latent_dim)
    L = lipschitz_lower(model, samples, pairs, cfg.seed)
    B = float(model.head.weight.detach().abs().max())
    s = binarize(mask).salient_dim
    f0 = float(_encode(model, np.zeros((1, cfg.dim))).norm())
    return BoundConstants(cfg.radius, cfg.sigma**2, L, B, s, model.num_classes, f0,
                          kernel_sup_product, model.latent_dim)


def theorem_hsic(model: SaliencyNet, mask: Optional[SaliencyMask], samples: np.ndarray,
                 kcfg: KernelConfig = KernelConfig()) -> float:
    """Unnormalized HSIC between tMVN inputs and their salient latents,
    using the training kernel."""
    z = _encode(model, samples)
    beta = torch.ones(z.shape[1], dtype=z.dtype) if mask is None else torch.as_tensor(np.array(mask.beta))
    Kx = gram(torch.as_tensor(samples, dtype=torch.float64), kcfg)
    Kz = gram(beta * z, kcfg)
    return max(float(hsic(Kx, Kz)), 0.0)


def bound_rhs(consts: BoundConstants, hsic_xz: float, r: float) -> float:
    c = consts
    if c.kernel_sup_product == 0 or c.sigma2 == 0:
        raise TheoryError("sigma^2 and kernel_sup_product must be positive")
    return (r * c.R * c.B * math.sqrt(c.k * c.s) * (c.L * c.R + c.f0_norm) * hsic_xz
            / (c.sigma2 * c.kernel_sup_product))


def _outputs(model: SaliencyNet, flat: torch.Tensor) -> torch.Tensor:
    x = flat.to(next(model.parameters()).dtype)
    shape = model.input_shape
    if shape is not None:
        x = x.reshape(len(x), *shape)
    return model(x)[1].double()


def _sphere(rng, n: int, d: int, r: float) -> torch.Tensor:
    u = rng.normal(size=(n, d))
    u *= r / np.linalg.norm(u, axis=1, keepdims=True)
    return torch.as_tensor(u)


def empirical_deviation(model: SaliencyNet, samples: np.ndarray, r: float, trials: int = 4,
                        seed: int = 0, mode: str = "sphere", ascent_steps: int = 10) -> float:
    """Mean ||h(x + d) - h(x)|| with ``d`` on the radius-``r`` sphere.

    ``mode="worst"`` instead maximises per sample, starting from each trial's
    sphere point and repeatedly jumping to ``r g / ||g||``, the maximiser of
    the linearised deviation over the ball (power iteration when ``h`` is
    linear).  Every iterate is feasible, so the best one per sample is kept
    and the per-sample maxima are averaged.
    """
    if mode not in ("sphere", "worst"):
        raise ValueError(f"unknown mode {mode!r}")
    if r == 0 or len(samples) == 0:
        return 0.0
    if r < 0:
        raise TheoryError("r must be >= 0")
    was_training = model.training
    model.eval()
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(np.asarray(samples), dtype=torch.float64)
    n, d = x.shape
    with torch.no_grad():
        h0 = _outputs(model, x)
    per_trial = []
    for _ in range(max(trials, 1)):
        delta = _sphere(rng, n, d, r)
        if mode == "worst":
            best = torch.zeros(n, dtype=torch.float64)
            for _ in range(ascent_steps):
                delta = delta.detach().requires_grad_(True)
                dev = (_outputs(model, x + delta) - h0).norm(dim=1)
                best = torch.maximum(best, dev.detach())
                (g,) = torch.autograd.grad(dev.sum(), delta)
                gn = g.norm(dim=1, keepdim=True)
                delta = torch.where(gn > 0, r * g / gn.clamp_min(1e-300), delta.detach())
        with torch.no_grad():
            last = (_outputs(model, x + delta.detach()) - h0).norm(dim=1)
        per_trial.append(torch.maximum(best, last) if mode == "worst" else last)
    model.train(was_training)
    stack = torch.stack(per_trial)
    vals = stack.max(0).values if mode == "worst" else stack.mean(0)
    return float(vals.mean())


def salient_volume(model: SaliencyNet, samples: np.ndarray, eps_threshold: float,
                   consts: Optional[BoundConstants] = None, hsic_xz: Optional[float] = None):
    """Fraction of samples whose output Jacobian norm exceeds the threshold,
    and the matching bound ``bound_rhs(r=1) / eps_threshold`` (NaN without
    constants)."""
    if not eps_threshold > 0:
        raise TheoryError("eps_threshold must be positive")
    if len(samples):
        norms = jacobian_frobenius(model, _to_input(model, samples)).double().cpu().numpy()
        empirical = float((norms > eps_threshold).mean())
    else:
        empirical = 0.0
    bound = float("nan")
    if consts is not None and hsic_xz is not None:
        bound = bound_rhs(consts, hsic_xz, 1.0) / eps_threshold
    return empirical, bound


# -------------------------------------------------------------------- report

THEORY_HEADER = ["model_id", "r", "s", "hsic_xz", "L", "B", "lhs_mean", "lhs_worst", "rhs"]


@dataclass
class TheoryRow:
    model_id: str
    r: float
    s: int
    hsic_xz: float
    L: float
    B: float
    lhs_mean: float
    lhs_worst: float
    rhs: float


def evaluate_model(model_id: str, model: SaliencyNet, mask: Optional[SaliencyMask], cfg: TmvnConfig,
                   radii: Sequence[float] = (0.5,), trials: int = 4, pairs: int = 10_000,
                   kernel_sup_product: float = 1.0, worst: bool = True,
                   kcfg: KernelConfig = KernelConfig()) -> list:
    if mask is not None:
        model.attach_mask(mask)
    samples = sample_tmvn(cfg)
    consts = estimate_constants(model, mask, cfg, pairs, kernel_sup_product, samples)
    h = theorem_hsic(model, mask, samples, kcfg)
    rows = []
    for r in radii:
        mean = empirical_deviation(model, samples, r, trials, cfg.seed)
        wc = empirical_deviation(model, samples, r, 1, cfg.seed, mode="worst") if worst else float("nan")
        rows.append(TheoryRow(model_id, float(r), consts.s, h, consts.L, consts.B, mean, wc,
                              bound_rhs(consts, h, r)))
    return rows


def write_theory_csv(path, rows: Sequence[TheoryRow]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(THEORY_HEADER)
        for row in rows:
            w.writerow([getattr(row, k) for k in THEORY_HEADER])


def summary_text(rows: Sequence[TheoryRow], kernel_sup_product: float = 1.0) -> str:
    lines = [
        "Robustness bound with estimated constants (not a certificate).",
        f"L is an empirical lower estimate; kernel_sup_product = {kernel_sup_product}; "
        "the o(r) remainder is not quantified.",
        "",
    ]
    for row in rows:
        lines.append(f"{row.model_id}: r={row.r:g} s={row.s} hsic={row.hsic_xz:.4g} "
                     f"sqrt(s)*hsic={math.sqrt(row.s) * row.hsic_xz:.4g} lhs_mean={row.lhs_mean:.4g} "
                     f"lhs_worst={row.lhs_worst:.4g} rhs={row.rhs:.4g}")
    return "\n".join(lines) + "\n"
