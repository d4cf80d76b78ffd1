"""Alternating optimisation of network parameters and the saliency mask.

Each outer epoch runs minibatch gradient steps on the composite objective
with the mask held fixed, then recomputes the mask in closed form from
evaluation-mode latents and blends it in with a moving average.
"""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .config import TrainConfig
from .datasets import DatasetSplit, ImageSet
from .decomposition import SaliencyMask, closed_form_mask, update_mask_ema
from .models import ArchitectureSpec, SaliencyNet, build_model, encode_all, predict
from .objectives import (
    TERMS,
    LossBreakdown,
    baseline_regularizer,
    clustering_losses,
    hsplid_penalties,
    masked_cross_entropy,
    total_objective,
)

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", *TERMS, "total", "clean_acc", "s"]


@dataclass
class RunManifest:
    config: dict
    seed: int
    dataset_sha256: str = ""
    epochs: list = field(default_factory=list)
    mask_updates: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def add_epoch(self, record: dict):
        self.epochs.append(dict(record))

    def add_mask_update(self, record: dict):
        self.mask_updates.append(dict(record))

    def to_dict(self, with_time: bool = True) -> dict:
        d = asdict(self)
        if not with_time:
            d.pop("wall_clock")
        return d

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(model.parameters(), lr=cfg.learning_rate)
    return torch.optim.Adam(model.parameters(), lr=cfg.learning_rate,
                            betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int):
    """Seed-deterministic shuffled minibatch index lists; trailing batches of
    fewer than two samples are dropped (kernel terms need n >= 2)."""
    g = torch.Generator().manual_seed(seed * 100_003 + epoch)
    perm = torch.randperm(n, generator=g).numpy()
    out = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in out if len(b) >= 2]


def batch_objective(model: SaliencyNet, x: torch.Tensor, y: torch.Tensor, cfg: TrainConfig) -> LossBreakdown:
    """Composite loss on one minibatch; the mask is the model's attached beta."""
    w = cfg.weights
    z, logits = model(x)
    beta = model.beta if model.beta is not None else torch.ones(z.shape[1], dtype=z.dtype)
    parts = {"ce": masked_cross_entropy(logits, y)}

    with torch.set_grad_enabled(torch.is_grad_enabled() and (w.lambda_s > 0 or w.lambda_n > 0)):
        parts["L_s"], parts["L_n"] = clustering_losses(z, y, beta, cfg.normalize_clustering)
    with torch.set_grad_enabled(torch.is_grad_enabled() and (w.rho_s > 0 or w.rho_n > 0)):
        parts["hsic_x_zs"], parts["hsic_y_zn"] = hsplid_penalties(
            x.reshape(len(x), -1), z, y, beta, model.num_classes, cfg.kernel_cfg, cfg.hsic_mode)
    spec = cfg.baseline_spec
    if spec.kind != "none":
        parts["baseline_reg"] = baseline_regularizer(
            model.parameters(), z, spec, x=x.reshape(len(x), -1), labels=y,
            num_classes=model.num_classes, nocco_reg=cfg.nocco_reg)
    return total_objective(parts, w)


def train_epoch(model: SaliencyNet, mask: Optional[SaliencyMask], data: ImageSet, cfg: TrainConfig,
                optimizer: torch.optim.Optimizer, epoch: int = 0, batches=None) -> LossBreakdown:
    """One pass of minibatch updates with ``mask`` held fixed.

    Returns the batch-mean of every loss term.
    """
    if mask is not None:
        model.attach_mask(mask)
    model.train()
    if batches is None:
        batches = epoch_batches(len(data), cfg.batch_size, cfg.seed, epoch)
    p = next(model.parameters())
    sums = dict.fromkeys([*TERMS, "total"], 0.0)
    for idx in batches:
        x = torch.as_tensor(data.images[idx], dtype=p.dtype)
        y = torch.as_tensor(data.labels[idx], dtype=torch.long)
        bd = batch_objective(model, x, y, cfg)
        optimizer.zero_grad(set_to_none=True)
        if torch.is_tensor(bd.total) and bd.total.requires_grad:
            bd.total.backward()
            optimizer.step()
        for k, v in bd.as_floats().items():
            sums[k] += v
    n = max(len(batches), 1)
    return LossBreakdown(**{k: v / n for k, v in sums.items()})


def _subset(n: int, fraction: float, seed: int, tag: int) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(n)
    rng = np.random.default_rng([seed, tag])
    k = max(2, int(round(fraction * n)))
    return np.sort(rng.choice(n, size=min(k, n), replace=False))


def update_mask(model: SaliencyNet, mask: SaliencyMask, data: ImageSet, cfg: TrainConfig,
                fraction: Optional[float] = None, tag: int = 0) -> SaliencyMask:
    """Closed-form mask from frozen-model latents, blended by ``beta_step``."""
    if cfg.beta_step == 1.0:
        return mask
    frac = cfg.beta_update_fraction if fraction is None else fraction
    idx = _subset(len(data), frac, cfg.seed, tag)
    Z = encode_all(model, data.images[idx])
    ls, ln = cfg.mask_lambdas
    new = closed_form_mask(Z, data.labels[idx], ls, ln)
    return update_mask_ema(mask, new, cfg.beta_step)


def accuracy(model: SaliencyNet, data: ImageSet) -> float:
    if len(data) == 0:
        return float("nan")
    return float((predict(model, data.images) == data.labels).mean())


# ------------------------------------------------------------- checkpoints


def save_checkpoint(path, model: SaliencyNet, mask: Optional[SaliencyMask], meta: Optional[dict] = None):
    """Zip archive: ``meta.json``, ``params.bin`` (little-endian float32,
    parameters in declaration order) and ``beta.bin`` (float64)."""
    names, shapes, blocks = [], [], []
    for name, p in model.named_parameters():
        names.append(name)
        shapes.append(list(p.shape))
        blocks.append(p.detach().cpu().numpy().astype("<f4").tobytes())
    doc = dict(meta or {})
    doc["architecture"] = model.arch.to_dict() if model.arch is not None else None
    doc["parameters"] = [{"name": n, "shape": s} for n, s in zip(names, shapes)]
    doc["mask_attached"] = mask is not None
    if mask is not None:
        doc["s"] = mask.salient_dim
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name, data in (
            ("meta.json", json.dumps(doc, indent=2, sort_keys=True).encode()),
            ("params.bin", b"".join(blocks)),
            ("beta.bin", b"" if mask is None else mask.beta.astype("<f8").tobytes()),
        ):
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, data)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: ``(model, mask, meta)``."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        raw = zf.read("params.bin")
        beta_raw = zf.read("beta.bin")
    a = meta["architecture"]
    arch = ArchitectureSpec(a["name"], a["input_shape"], a["latent_dim"], a["num_classes"],
                            a.get("hidden", 64), a.get("activation", "relu"))
    model = build_model(arch, seed=0)
    flat = np.frombuffer(raw, dtype="<f4")
    off = 0
    params = dict(model.named_parameters())
    if [p["name"] for p in meta["parameters"]] != list(params):
        raise ValueError("checkpoint parameter order does not match the architecture")
    with torch.no_grad():
        for entry in meta["parameters"]:
            p = params[entry["name"]]
            n = p.numel()
            p.copy_(torch.from_numpy(flat[off:off + n].reshape(entry["shape"]).copy()))
            off += n
    mask = None
    if meta.get("mask_attached"):
        mask = SaliencyMask(np.frombuffer(beta_raw, dtype="<f8"))
        model.attach_mask(mask)
    model.eval()
    return model, mask, meta


def write_metrics_csv(path, manifest: RunManifest):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in manifest.epochs:
            w.writerow([rec[k] if k in ("epoch", "s") else repr(float(rec[k])) for k in METRICS_HEADER])


# --------------------------------------------------------------------- fit


def fit(data, cfg: TrainConfig, out_dir=None, model: Optional[SaliencyNet] = None,
        selection_metric: Optional[Callable[[SaliencyNet], float]] = None):
    """Train with alternating parameter / mask updates.

    ``data`` is a :class:`DatasetSplit` (val used for per-epoch accuracy) or
    a bare :class:`ImageSet`.  With ``out_dir`` the run writes
    ``checkpoint.zip`` (final, plus ``checkpoint_epNNN.zip`` every
    ``checkpoint_every`` epochs), ``manifest.json`` and ``metrics.csv``.
    ``selection_metric`` (higher is better), when given, picks the returned
    model among epochs.
    """
    t0 = time.time()
    if isinstance(data, DatasetSplit):
        train, val, test, digest = data.train, data.val, data.test, data.digest()
    else:
        train, val, test, digest = data, None, None, ""
    seed_everything(cfg.seed)
    if model is None:
        arch = cfg.architecture(tuple(train.images.shape[1:]), max(train.num_classes, 2))
        model = build_model(arch, seed=cfg.seed)
    optimizer = make_optimizer(model, cfg)
    mask = SaliencyMask.ones(model.latent_dim) if cfg.mask_updates else None
    manifest = RunManifest(config=cfg.to_dict(), seed=cfg.seed, dataset_sha256=digest)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n_batches_total = len(epoch_batches(len(train), cfg.batch_size, cfg.seed, 0))
    per_update = max(1, math.ceil(cfg.beta_update_fraction * n_batches_total))
    n_updates = 0
    best = (-math.inf, None)

    for epoch in range(1, cfg.epochs + 1):
        batches = epoch_batches(len(train), cfg.batch_size, cfg.seed, epoch)
        chunks = [batches[i:i + per_update] for i in range(0, len(batches), per_update)]
        acc = {k: 0.0 for k in [*TERMS, "total"]}
        for chunk in chunks:
            bd = train_epoch(model, mask, train, cfg, optimizer, epoch, batches=chunk)
            for k, v in bd.as_floats().items():
                acc[k] += v * len(chunk)
            if mask is not None:
                frac = cfg.beta_init_fraction if n_updates == 0 else cfg.beta_update_fraction
                mask = update_mask(model, mask, train, cfg, fraction=frac, tag=n_updates)
                n_updates += 1
                manifest.add_mask_update({"epoch": epoch, "update": n_updates, **mask.summary()})
        nb = max(len(batches), 1)
        record = {"epoch": epoch, **{k: v / nb for k, v in acc.items()}}
        if mask is not None:
            model.attach_mask(mask)
        record["clean_acc"] = accuracy(model, val) if val is not None and len(val) else accuracy(model, train)
        record["s"] = mask.salient_dim if mask is not None else model.latent_dim
        manifest.add_epoch(record)
        log.info("epoch %d total=%.4f acc=%.4f s=%d", epoch, record["total"], record["clean_acc"], record["s"])
        if selection_metric is not None:
            score = selection_metric(model)
            record["selection_score"] = score
            if score > best[0]:
                best = (score, (copy.deepcopy(model.state_dict()), mask, epoch))
        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_ep{epoch:03d}.zip", model, mask,
                            {"epoch": epoch, "config_sha256": cfg.digest()})

    if best[1] is not None:
        state, mask, epoch = best[1]
        model.load_state_dict(state)
        if mask is not None:
            model.attach_mask(mask)
        manifest.final["selected_epoch"] = epoch
    model.eval()
    manifest.final.update({
        "clean_acc_val": accuracy(model, val) if val is not None and len(val) else None,
        "clean_acc_test": accuracy(model, test) if test is not None and len(test) else None,
        "s": mask.salient_dim if mask is not None else model.latent_dim,
        "epochs": cfg.epochs,
    })
    manifest.wall_clock = time.time() - t0
    if out is not None:
        save_checkpoint(out / "checkpoint.zip", model, mask,
                        {"epoch": cfg.epochs, "config_sha256": cfg.digest()})
        manifest.write(out / "manifest.json")
        write_metrics_csv(out / "metrics.csv", manifest)
    return model, mask, manifest
