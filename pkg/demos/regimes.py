"""
Regimes of the branching OU CLT
===============================

Spectrum, regime and limiting variance for a few test functions, all from
quadrature. No simulation here.
"""

# %%
import numpy as np

from branching_clt import FunctionExpansion, ModelSpec, OUParams, predicted_variance, regime

ou = OUParams(b=1.0, sigma2=1.0, d=1)

# %% [markdown]
# Constant branching rate beta and binary splitting give alpha = beta, so
# lambda_k = (k - 1) - beta. Raising beta pushes more levels into the large regime.

# %%
for beta in (1.0, 2.0, 4.0):
    model = ModelSpec(ou, beta, [0.0, 0.0, 1.0])
    print(f"beta = {beta}: lambda_1..4 =", [model.basis.lam(k) for k in range(1, 5)])
    for k in (2, 3, 4):
        f = FunctionExpansion.from_coeffs(model.basis, {(k, 1): 1.0})
        thm, var = predicted_variance(model, f)
        print(f"   phi_{k}: {regime(model, f):8s} {thm}  variance {var:.6g}")

# %% [markdown]
# A mixed function: the critical part alone sets the variance.

# %%
model = ModelSpec(ou, 4.0, [0.0, 0.0, 1.0])
f = FunctionExpansion.from_coeffs(model.basis, {(1, 1): 0.5, (2, 1): 1.0, (3, 1): 1.0, (4, 1): 0.3})
print(predicted_variance(model, f))
print(np.round(f.vector, 3))
