"""Kernel dependence and the closed-form saliency mask, on toy data."""
# %%
import numpy as np

from hsplid import closed_form_mask, gaussian_gram, hsic, nocco

rng = np.random.default_rng(0)

# %% dependence shrinks toward zero when X and Z are independent
for n in (64, 256, 512):
    x = rng.normal(size=(n, 2))
    indep = hsic(gaussian_gram(x), gaussian_gram(rng.normal(size=(n, 2)))).item()
    dep = hsic(gaussian_gram(x), gaussian_gram(x**2 + 0.1 * rng.normal(size=(n, 2)))).item()
    print(f"n={n:4d}  independent {indep:.5f}  dependent {dep:.5f}")

# %% NOCCO normalises away most of the kernel scale
x = rng.normal(size=(100, 3))
z = x @ rng.normal(size=(3, 3))
print("nocco", nocco(gaussian_gram(x), gaussian_gram(z)).item())

# %% a 6-d latent where only the first two dimensions follow the label
labels = rng.integers(0, 3, 300)
Z = rng.normal(size=(300, 6))
Z[:, :2] += 4.0 * labels[:, None]
# noise dimensions have within-class scatter close to their total scatter,
# so their beta sits near lambda_n / (lambda_s + lambda_n)
for ls, ln in ((0.1, 0.2), (1.0, 0.2)):
    mask = closed_form_mask(Z, labels, lambda_s=ls, lambda_n=ln)
    print(f"lambda_s={ls} lambda_n={ln} beta", np.round(mask.beta, 3), "salient dims", mask.salient_dim)
