"""Region-restricted perturbations and the accuracy metrics built on them.

PGD here is L-infinity with pixel-ratio budgets: images live in [0, 1] and
``epsilon``/``alpha`` are in the same units.  The perturbation is zeroed
outside the allowed region after every step, so pixels there are never
touched.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .datasets import DatasetSplit, ImageSet, LabeledImage
from .decomposition import SaliencyMask, binarize
from .models import SaliencyNet, encode_all, predict

log = logging.getLogger(__name__)

REGIONS = ("full", "mask", "random_block")
CORRUPTIONS = ("brightness", "defocus", "occlusion")
MAX_PLACEMENT_TRIES = 1000
OCCLUSION_PATCH = 4


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSpec:
    family: str = "pgd"
    epsilon: float = 0.0
    alpha: float = 0.0156
    iters: int = 10
    region: str = "mask"
    block_fraction: float = 0.25
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("pgd", "none"):
            raise AttackError(f"unknown attack family {self.family!r}")
        if not self.epsilon >= 0:
            raise AttackError("epsilon must be >= 0")
        if self.iters < 1:
            raise AttackError("iters must be >= 1")
        if self.region not in REGIONS:
            raise AttackError(f"unknown region {self.region!r}")
        if not 0 < self.block_fraction <= 1:
            raise AttackError("block_fraction must lie in (0, 1]")

    @property
    def name(self) -> str:
        return self.family

    def with_seed(self, seed: int) -> "AttackSpec":
        return AttackSpec(self.family, self.epsilon, self.alpha, self.iters, self.region,
                          self.block_fraction, self.random_start, seed)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "brightness"
    severity: int = 3
    region: str = "mask"
    block_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise AttackError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise AttackError("severity must lie in [1, 5]")
        if self.region not in REGIONS:
            raise AttackError(f"unknown region {self.region!r}")

    @property
    def name(self) -> str:
        return self.kind

    @property
    def epsilon(self) -> float:
        return float(self.severity)

    def with_seed(self, seed: int) -> "CorruptionSpec":
        return CorruptionSpec(self.kind, self.severity, self.region, self.block_fraction, seed)


# ------------------------------------------------------------------ regions


def _place(region: np.ndarray, bh: int, bw: int, rng) -> tuple:
    """Top-left corner of a bh x bw block lying wholly inside ``region``."""
    H, W = region.shape
    if bh > H or bw > W:
        raise AttackError("block larger than image")
    for _ in range(MAX_PLACEMENT_TRIES):
        r = int(rng.integers(0, H - bh + 1))
        c = int(rng.integers(0, W - bw + 1))
        if region[r:r + bh, c:c + bw].all():
            return r, c
    raise AttackError(f"could not place a {bh}x{bw} block inside the region after "
                      f"{MAX_PLACEMENT_TRIES} tries")


def allowed_region(region_masks: np.ndarray, region: str, block_fraction: float = 0.25,
                   seed: int = 0) -> np.ndarray:
    """Per-sample 0/1 float masks ``(N, H, W)`` of perturbable pixels."""
    region_masks = np.asarray(region_masks)
    if region == "full":
        return np.ones(region_masks.shape, dtype=np.float32)
    if region == "mask":
        return (region_masks > 0).astype(np.float32)
    rng = np.random.default_rng(seed)
    N, H, W = region_masks.shape
    bh, bw = int(H * block_fraction), int(W * block_fraction)
    out = np.zeros((N, H, W), dtype=np.float32)
    for i in range(N):
        r, c = _place(region_masks[i] > 0, bh, bw, rng)
        out[i, r:r + bh, c:c + bw] = 1
    return out


def _as_batch(x, labels=None, region_masks=None):
    if isinstance(x, LabeledImage):
        return x.pixels[None], np.array([x.label]), x.region_mask[None], True
    if isinstance(x, ImageSet):
        return x.images, x.labels, x.region_masks, False
    return np.asarray(x), np.asarray(labels), np.asarray(region_masks), False


# --------------------------------------------------------------------- PGD


@dataclass
class AttackResult:
    images: np.ndarray     # float32 adversarial images, same shape as input
    delta: np.ndarray      # float64 perturbation, zero outside ``allowed``
    allowed: np.ndarray    # (N, H, W) 0/1


def pgd_batch(model: SaliencyNet, images, labels, region_masks, spec: AttackSpec,
              check: bool = False) -> AttackResult:
    """Masked L-infinity PGD on a batch.

    The iterate is kept in float64: ``delta <- clip(delta + alpha*sign(g),
    -eps, eps) * allowed``, with the clip bounds tightened per pixel so
    ``x + delta`` stays in [0, 1].
    With ``check`` the support and box constraints are asserted after every
    step.
    """
    x = np.asarray(images)
    if x.ndim != 4 or np.asarray(region_masks).shape != (x.shape[0], x.shape[2], x.shape[3]):
        raise AttackError(f"region shape mismatch: images {x.shape}, masks {np.shape(region_masks)}")
    allowed = allowed_region(region_masks, spec.region, spec.block_fraction, spec.seed)
    if spec.family == "none" or spec.epsilon == 0:
        return AttackResult(x.copy(), np.zeros(x.shape), allowed)
    p = next(model.parameters())
    was_training = model.training
    model.eval()
    x64 = torch.as_tensor(x, dtype=torch.float64)
    a = torch.as_tensor(allowed, dtype=torch.float64)[:, None]
    y = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    eps = float(spec.epsilon)
    if spec.random_start:
        g = torch.Generator().manual_seed(int(spec.seed))
        delta = (torch.rand(x64.shape, generator=g, dtype=torch.float64) * 2 - 1) * eps * a
    else:
        delta = torch.zeros_like(x64)
    # per-pixel bounds: exact, unlike ((x + delta).clamp(0, 1) - x)
    lo = torch.clamp(-x64, min=-eps)
    hi = torch.clamp(1 - x64, max=eps)
    delta = torch.minimum(torch.maximum(delta, lo), hi)
    for _ in range(spec.iters):
        xin = (x64 + delta).to(p.dtype).requires_grad_(True)
        loss = F.cross_entropy(model(xin)[1], y, reduction="sum")
        (grad,) = torch.autograd.grad(loss, xin)
        step = delta + spec.alpha * grad.to(torch.float64).sign()
        delta = torch.minimum(torch.maximum(step, lo), hi) * a
        if check:
            assert float(delta.abs().max()) <= eps
            assert bool((delta[a == 0] == 0).all())
    model.train(was_training)
    adv = (x64 + delta).clamp(0, 1)
    return AttackResult(adv.to(torch.float32).numpy(), delta.numpy(), allowed)


def pgd(model: SaliencyNet, sample: Union[LabeledImage, ImageSet, np.ndarray], spec: AttackSpec,
        labels=None, region_masks=None, batch_size: int = 500, check: bool = False):
    """Adversarial image(s) for a single :class:`LabeledImage` or a batch.

    Returns one ``(1, H, W)`` image for a single sample, else the stacked
    adversarial batch.
    """
    x, y, m, single = _as_batch(sample, labels, region_masks)
    out = []
    for i in range(0, len(x), batch_size):
        sl = slice(i, i + batch_size)
        sub = AttackSpec(spec.family, spec.epsilon, spec.alpha, spec.iters, spec.region,
                         spec.block_fraction, spec.random_start, spec.seed * 1_000_003 + i)
        out.append(pgd_batch(model, x[sl], y[sl], m[sl], sub, check).images)
    adv = np.concatenate(out) if out else x.copy()
    return adv[0] if single else adv


# ------------------------------------------------------------- corruptions


def _corrupt_one(img: np.ndarray, region: np.ndarray, spec: CorruptionSpec, rng) -> np.ndarray:
    """``img`` is (C, H, W); ``region`` a 0/1 (H, W) array of editable pixels."""
    if spec.kind == "brightness":
        out = np.clip(img + np.float32(0.1 * spec.severity), 0, 1)
    elif spec.kind == "defocus":
        size = 2 * spec.severity + 1
        out = np.stack([ndimage.uniform_filter(c, size=size, mode="nearest") for c in img])
    else:
        out = img.copy()
        for _ in range(spec.severity):
            r, c = _place(region > 0, OCCLUSION_PATCH, OCCLUSION_PATCH, rng)
            out[:, r:r + OCCLUSION_PATCH, c:c + OCCLUSION_PATCH] = 1.0
    return np.where(region[None] > 0, out, img).astype(img.dtype)


def corrupt(sample, spec: CorruptionSpec, region_masks=None):
    """Apply a corruption restricted to the allowed region.

    Pixels outside it are returned bitwise unchanged.
    """
    x, _, m, single = _as_batch(sample, np.zeros(0), region_masks)
    allowed = allowed_region(m, spec.region, spec.block_fraction, spec.seed)
    rng = np.random.default_rng([spec.seed, 7])
    out = np.stack([_corrupt_one(x[i], allowed[i], spec, rng) for i in range(len(x))]) if len(x) else x.copy()
    return out[0] if single else out


# ---------------------------------------------------------------- metrics


@dataclass
class RobustResult:
    name: str
    region: str
    epsilon: float
    mean: float
    std: float
    per_seed: dict = field(default_factory=dict)

    def rows(self):
        return [{"attack": self.name, "region": self.region, "epsilon": self.epsilon,
                 "seed": s, "accuracy": a} for s, a in self.per_seed.items()]


def perturbed_images(model, data: ImageSet, spec, check: bool = False) -> np.ndarray:
    if isinstance(spec, CorruptionSpec):
        return corrupt(data, spec)
    return pgd(model, data, spec, check=check)


def robust_accuracy(model: SaliencyNet, data: Union[ImageSet, DatasetSplit], spec,
                    seeds: Sequence[int] = (0,), check: bool = False) -> RobustResult:
    """Accuracy after perturbation, repeated over ``seeds``.

    Reports mean and population standard deviation.
    """
    if isinstance(data, DatasetSplit):
        data = data.test
    if len(data) == 0:
        raise AttackError("empty split")
    per_seed = {}
    for s in seeds:
        sp = spec.with_seed(int(s))
        adv = perturbed_images(model, data, sp, check)
        per_seed[int(s)] = float((predict(model, adv) == data.labels).mean())
    vals = np.array(list(per_seed.values()))
    return RobustResult(spec.name, spec.region, float(spec.epsilon), float(vals.mean()),
                        float(vals.std()), per_seed)


# ------------------------------------------------------------------ probe


@dataclass
class ProbeResult:
    accuracy: float
    degenerate: bool
    subspace: str
    num_classes: int


def probe_nonsalient(model: SaliencyNet, mask: Optional[SaliencyMask], split: DatasetSplit,
                     binarized: bool = False, subspace: str = "nonsalient",
                     tol: float = 1e-6, max_iter: int = 5000) -> ProbeResult:
    """Fit a multinomial logistic-regression probe on one latent subspace.

    ``subspace="nonsalient"`` uses ``(1 - beta) * z``; ``"salient"`` uses
    ``beta * z`` as a diagnostic.  Trained on ``split.train`` and scored on
    ``split.test``.  A probe whose features are identically zero returns
    chance accuracy with ``degenerate=True``.
    """
    from sklearn.linear_model import LogisticRegression

    if subspace not in ("nonsalient", "salient"):
        raise ValueError(f"unknown subspace {subspace!r}")
    k = max(split.train.num_classes, split.test.num_classes)
    if mask is None:
        mask = SaliencyMask.ones(model.latent_dim)
    if binarized:
        mask = binarize(mask)
    w = mask.beta if subspace == "salient" else 1.0 - mask.beta
    Ztr = encode_all(model, split.train.images) * w
    Zte = encode_all(model, split.test.images) * w
    if not np.any(Ztr):
        return ProbeResult(1.0 / k, True, subspace, k)
    clf = LogisticRegression(C=1.0, tol=tol, max_iter=max_iter)
    clf.fit(Ztr, split.train.labels)
    acc = float((clf.predict(Zte) == split.test.labels).mean())
    return ProbeResult(acc, False, subspace, k)


# -------------------------------------------------------------------- CSV

EVAL_HEADER = ["attack", "region", "epsilon", "seed", "accuracy"]
AGG_HEADER = ["attack", "region", "epsilon", "mean", "std", "n"]


def write_eval_csv(path, results: Sequence[RobustResult]):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, EVAL_HEADER, lineterminator="\n")
        w.writeheader()
        for r in results:
            w.writerows(r.rows())


def read_eval_csv(path) -> list:
    with open(path, newline="") as fh:
        return [
            {**row, "epsilon": float(row["epsilon"]), "seed": int(row["seed"]),
             "accuracy": float(row["accuracy"])}
            for row in csv.DictReader(fh)
        ]


def aggregate(rows) -> list:
    """Mean and population std of accuracy per (attack, region, epsilon)."""
    groups = {}
    for r in rows:
        groups.setdefault((r["attack"], r["region"], float(r["epsilon"])), []).append(float(r["accuracy"]))
    out = []
    for (a, reg, eps), vals in sorted(groups.items()):
        v = np.array(vals)
        out.append({"attack": a, "region": reg, "epsilon": eps, "mean": float(v.mean()),
                    "std": float(v.std()), "n": len(v)})
    return out


def write_aggregate_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, AGG_HEADER, lineterminator="\n")
        w.writeheader()
        w.writerows(aggregate(rows))
