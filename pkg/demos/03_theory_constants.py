"""Estimated constants of the robustness bound for a small random network.

The right-hand side uses a sampled lower estimate of the Lipschitz constant
and sets the kernel-supremum product to 1, so it is a trend indicator rather
than a certificate.
"""
# %%
import numpy as np

from hsplid.decomposition import SaliencyMask
from hsplid.models import ArchitectureSpec, build_model
from hsplid.theory import (
    TmvnConfig, bound_rhs, empirical_deviation, estimate_constants, sample_tmvn, theorem_hsic,
)

model = build_model(ArchitectureSpec("mlp_small", (1, 8, 8), 16, 4, hidden=32), seed=0)
cfg = TmvnConfig(dim=64, sigma=0.25, radius=3.0, n_samples=256)
x = sample_tmvn(cfg)
print("acceptance rate", round(cfg.acceptance, 4), "max norm", np.linalg.norm(x, axis=1).max().round(3))

# %% shrinking the salient set shrinks both sides
for keep in (16, 8, 2):
    mask = SaliencyMask(np.r_[np.ones(keep), np.zeros(16 - keep)])
    model.attach_mask(mask)
    c = estimate_constants(model, mask, cfg, pairs=2000, samples=x)
    h = theorem_hsic(model, mask, x)
    dev = empirical_deviation(model, x, 0.5, trials=4)
    print(f"s={c.s:2d} L~{c.L:.3f} hsic={h:.4f} deviation={dev:.4f} rhs={bound_rhs(c, h, 0.5):.3f}")
