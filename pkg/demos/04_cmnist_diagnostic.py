"""The C-MNIST diagnostic: label on the left digit, PGD on the right one.

Training both models takes roughly half an hour on one CPU core.  Runs are
written to ``runs/cmnist_demo`` and reused when present.
"""
# %%
from pathlib import Path

from hsplid.attacks import AttackSpec, probe_nonsalient, robust_accuracy
from hsplid.config import load_config
from hsplid.datasets import build_cmnist, load_mnist_dir
from hsplid.trainer import fit, load_checkpoint

root = Path(__file__).resolve().parents[1]
data = build_cmnist(load_mnist_dir(root / "data" / "mnist"))
print("train/val/test:", len(data.train), len(data.val), len(data.test))

# %%
models = {}
for name in ("cmnist_ce", "cmnist"):
    out = root / "runs" / "cmnist_demo" / name
    if not (out / "checkpoint.zip").exists():
        fit(data, load_config(root / "configs" / f"{name}.conf")[0], out_dir=out)
    models[name] = load_checkpoint(out / "checkpoint.zip")

# %%
attack = AttackSpec(epsilon=1.0, alpha=0.0156, iters=10, region="mask")
for name, (model, mask, _) in models.items():
    clean = robust_accuracy(model, data, AttackSpec(epsilon=0.0)).mean
    robust = robust_accuracy(model, data, attack, (0, 1, 2)).mean
    print(f"{name:10s} clean {clean:.4f}  right-digit PGD {robust:.4f}")
model, mask, _ = models["cmnist"]
print("non-salient probe", probe_nonsalient(model, mask, data).accuracy)
