# ---
# jupyter:
#   jupytext:
#     formats: py:percent
# ---

# %% [markdown]
# # Checking the hyper-gradients
#
# The width gradient has two parts: the data fit through the averaged
# prediction, and the log-determinant of the damped curvature.  Both are
# computed with forward-mode tangents.  This notebook checks them against
# central differences and looks at how the Kronecker-factored curvature
# compares with the dense one.

# %%
import numpy as np

from auglaplace.augment import AugmentationParams, affine_matrix, sample_eps, warp_image
from auglaplace.hypergrad import fd_oracle, grad_eta_total, marglik_at
from auglaplace.laplace import Prior
from auglaplace.model import MlpModel

rng = np.random.default_rng(0)
model = MlpModel.init([2, 20, 2], "tanh", seed=0)
model = model.with_params(model.flat_params() + 0.5 * rng.normal(size=model.n_params))
x = rng.normal(size=(30, 2))
y = (np.hypot(*x.T) > 1.2).astype(int)
prior = Prior([0.0, 0.0])

# %% [markdown]
# ## Analytic against finite differences, both curvatures

# %%
eps = sample_eps(rng, 8, 1, antithetic=True, batch=(len(x),))
for curvature in ("kfac", "full"):
    for eta in (0.2, 0.8, 1.6):
        aug = AugmentationParams("PointRotation", [eta])
        g = grad_eta_total(model, x, y, aug, prior, 8, curvature=curvature, eps=eps).gradient
        fd = fd_oracle(lambda e: marglik_at(model, x, y, aug.with_eta(e), prior, eps, curvature).total, aug.eta)
        print(f"{curvature:4s} eta={eta:3.1f}  data fit {g.loglik_part[0]:+9.5f}  logdet {g.logdet_part[0]:+9.5f}"
              f"  total {g.total[0]:+9.5f}  finite diff {fd[0]:+9.5f}")

# %% [markdown]
# ## At zero width the gradient vanishes exactly
#
# With antithetic noise every odd-in-noise term cancels pairwise, so the
# gradient at zero width is the exact zero vector, not a small number.

# %%
hp = grad_eta_total(model, x, y, AugmentationParams("PointRotation"), prior, 8, rng=rng, antithetic=True)
print("gradient at eta = 0:", hp.gradient.total, "exactly zero:", bool(np.all(hp.gradient.total == 0.0)))

# %% [markdown]
# ## The six affine generators on an 8x8 image
#
# Each component of the image width moves one generator: two shifts, a
# rotation, two scalings and a shear.  Warping a small blob with a unit
# sample along each one shows what it does.

# %%
ys, xs = np.mgrid[0:8, 0:8] - 3.5
blob = np.exp(-(xs**2 / 3.0 + ys**2 / 1.5))
for i, name in enumerate(["shift x", "shift y", "rotate", "scale x", "scale y", "shear"]):
    eta = np.zeros(6)
    eta[i] = 0.4
    T, _ = affine_matrix(eta, np.ones((1, 6)))
    moved = warp_image(blob, T[0])
    cy, cx = np.unravel_index(np.argmax(moved), moved.shape)
    print(f"{name:8s} peak at ({cy}, {cx}), mass ratio {moved.sum() / blob.sum():.3f}")
