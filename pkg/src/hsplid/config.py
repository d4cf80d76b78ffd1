"""Flat ``key = value`` configuration files.

One pair per line, ``#`` starts a comment, blank lines are ignored and
unknown keys are rejected.  Keys are split across three dataclasses:
:class:`TrainConfig` (training), :class:`DataConfig` (dataset construction)
and :class:`EvalConfig` (attacks, probes, theory checks).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Tuple

from .kernels import KernelConfig
from .models import ArchitectureSpec
from .objectives import BaselineRegSpec, LossWeights


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # optimisation
    epochs: int = 50
    learning_rate: float = 1e-5
    batch_size: int = 64
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    # architecture
    arch: str = "lenet3"
    latent_dim: int = 1024
    hidden: int = 64
    activation: str = "relu"
    # loss weights
    lambda_ce: float = 10.0
    lambda_s: float = 0.1
    lambda_n: float = 0.2
    rho_s: float = 0.5
    rho_n: float = 0.05
    normalize_clustering: bool = False
    # kernels
    kernel: str = "gaussian"
    bandwidth: str = "median"
    nocco_reg: float = 1e-5
    hsic_mode: str = "nocco"
    # baseline regularizer
    baseline: str = "none"
    baseline_strength: float = 0.0
    hbar_lambda_x: float = 0.0
    hbar_lambda_y: float = 0.0
    hbar_sigma: float = 5.0
    # mask schedule
    mask_updates: bool = True
    mask_lambda_s: Optional[float] = None
    mask_lambda_n: Optional[float] = None
    beta_step: float = 0.8
    beta_init_fraction: float = 1.0
    beta_update_fraction: float = 1.0
    # recorded only; has no effect on training
    shared_space_variation: float = 0.025
    # artifacts / model selection
    checkpoint_every: int = 0
    select_epsilon: float = 0.0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not 0.0 <= self.beta_step <= 1.0:
            raise ConfigError("beta_step must lie in [0, 1]")
        for name in ("beta_init_fraction", "beta_update_fraction"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if self.hsic_mode not in ("nocco", "hsic"):
            raise ConfigError(f"unknown hsic_mode {self.hsic_mode!r}")
        # fail early on invalid nested values
        self.weights, self.kernel_cfg, self.baseline_spec, self.mask_lambdas

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_ce, self.lambda_s, self.lambda_n, self.rho_s, self.rho_n)

    @property
    def kernel_cfg(self) -> KernelConfig:
        bw = self.bandwidth if self.bandwidth == "median" else float(self.bandwidth)
        return KernelConfig(self.kernel, bw, self.nocco_reg)

    @property
    def baseline_spec(self) -> BaselineRegSpec:
        return BaselineRegSpec(self.baseline, self.baseline_strength, self.hbar_lambda_x,
                               self.hbar_lambda_y, self.hbar_sigma)

    @property
    def mask_lambdas(self) -> Tuple[float, float]:
        ls = self.lambda_s if self.mask_lambda_s is None else self.mask_lambda_s
        ln = self.lambda_n if self.mask_lambda_n is None else self.mask_lambda_n
        if ls < 0 or ln < 0:
            raise ConfigError("mask lambdas must be nonnegative")
        return ls, ln

    def architecture(self, input_shape=(1, 64, 64), num_classes: int = 10) -> ArchitectureSpec:
        return ArchitectureSpec(self.arch, input_shape, self.latent_dim, num_classes,
                                self.hidden, self.activation)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass(frozen=True)
class DataConfig:
    dataset: str = "cmnist"
    mnist_dir: str = "data/mnist"
    pair_seed: int = 0
    split_seed: int = 0
    val_fraction: float = 0.2
    limit: int = 0
    n_per_class: int = 200
    num_classes: int = 10
    archive: str = ""

    def __post_init__(self):
        if self.dataset not in ("cmnist", "synthetic"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")


@dataclass(frozen=True)
class EvalConfig:
    attack: str = "pgd"
    attack_epsilons: Tuple[float, ...] = (0.0, 1.0)
    attack_alpha: float = 0.0156
    attack_iters: int = 10
    attack_region: str = "mask"
    block_fraction: float = 0.25
    random_start: bool = True
    eval_seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    corruptions: Tuple[str, ...] = ()
    corruption_severity: int = 3
    probe_binarized: bool = False
    tmvn_sigma: float = 0.25
    tmvn_radius: float = 17.0
    tmvn_samples: int = 256
    theory_r: Tuple[float, ...] = (0.5,)
    theory_trials: int = 4
    lipschitz_pairs: int = 10000
    kernel_sup_product: float = 1.0
    eps_threshold: float = 1.0
    checkpoint: str = ""


SECTIONS = (TrainConfig, DataConfig, EvalConfig)


def _field_types(cls):
    return {f.name: f for f in fields(cls)}


def _coerce(raw: str, default, name: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(s) for s in items)
        if default is None:
            return None if raw.lower() in ("none", "") else float(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc


ABLATION_ROWS = ("ce_only", "ce_clustering", "ce_hsic", "full")


def ablation_configs(base: TrainConfig) -> dict:
    """The four loss-term groupings, each keeping ``base``'s mask computation.

    The mask update always uses the base clustering weights, so only the
    optimised loss terms differ between rows.
    """
    ls, ln = base.mask_lambdas
    common = dict(mask_lambda_s=ls, mask_lambda_n=ln)
    return {
        "ce_only": replace(base, lambda_s=0.0, lambda_n=0.0, rho_s=0.0, rho_n=0.0, **common),
        "ce_clustering": replace(base, rho_s=0.0, rho_n=0.0, **common),
        "ce_hsic": replace(base, lambda_s=0.0, lambda_n=0.0, **common),
        "full": replace(base, **common),
    }


def parse_pairs(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def from_pairs(pairs: dict):
    """Split raw ``key -> str`` pairs into (TrainConfig, DataConfig, EvalConfig)."""
    known = {}
    for cls in SECTIONS:
        for name, f in _field_types(cls).items():
            known[name] = (cls, f)
    unknown = sorted(set(pairs) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    kwargs = {cls: {} for cls in SECTIONS}
    for key, raw in pairs.items():
        cls, f = known[key]
        kwargs[cls][key] = _coerce(raw, f.default, key)
    try:
        return tuple(cls(**kwargs[cls]) for cls in SECTIONS)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def parse_config(text: str):
    return from_pairs(parse_pairs(text))


def load_config(path):
    return parse_config(Path(path).read_text())


def format_config(*configs) -> str:
    """Render configs back to the ``key = value`` grammar."""
    lines = []
    for cfg in configs:
        lines.append(f"# {type(cfg).__name__}")
        for f in fields(cfg):
            v = getattr(cfg, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
