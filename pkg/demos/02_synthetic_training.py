"""Train a small net on the synthetic shapes data, then attack it.

Each image has a class glyph on the left and a distractor on the right; the
right half is the attackable region.
"""
# %%
import numpy as np

from hsplid.attacks import AttackSpec, probe_nonsalient, robust_accuracy
from hsplid.config import TrainConfig
from hsplid.datasets import build_synthetic_shapes
from hsplid.trainer import fit

data = build_synthetic_shapes(40, k=4, seed=0)
print("train/val/test:", len(data.train), len(data.val), len(data.test))

# %% vanilla cross-entropy vs the full objective
common = dict(arch="mlp_small", latent_dim=16, hidden=32, epochs=15, learning_rate=1e-3, batch_size=16)
runs = {
    "ce": TrainConfig(mask_updates=False, lambda_s=0, lambda_n=0, rho_s=0, rho_n=0, **common),
    "hsplid": TrainConfig(**common),
}
models = {name: fit(data, cfg) for name, cfg in runs.items()}

# %% right-half PGD at a few budgets
for name, (model, mask, man) in models.items():
    accs = [robust_accuracy(model, data, AttackSpec(epsilon=e, region="mask"), (0, 1)).mean
            for e in (0.0, 0.1, 0.3)]
    print(f"{name:7s} s={man.final['s']:3d} robust acc at eps 0/0.1/0.3:", np.round(accs, 3))

# %% does the non-salient part still know the label?
model, mask, _ = models["hsplid"]
print("non-salient probe accuracy", probe_nonsalient(model, mask, data).accuracy)
