# ---
# jupyter:
#   jupytext:
#     formats: py:percent
# ---

# %% [markdown]
# # Rotated MNIST subsets
#
# Reads the cached runs under `runs/` (train them with
# `python3 tests/_runs.py mnist_partialrot_baseline mnist_partialrot_marglik mnist_fullrot_marglik`)
# and summarises accuracy, evidence and the learned affine widths.

# %%
import json
from pathlib import Path

import numpy as np

from auglaplace import cli

ROOT = Path.cwd() if (Path.cwd() / "runs").is_dir() else Path.cwd().parent
RUNS = ROOT / "runs"
results = {p: json.loads(p.read_text()) for p in sorted(RUNS.glob("mnist_*/seed*/result.json"))}
print(f"{len(results)} MNIST runs found")

# %% [markdown]
# ## Accuracy and evidence per method

# %%
for row in cli.summarize(cli.collect_results(RUNS)):
    if row["dataset"] != "mnist":
        continue
    print(f"{row['transform']:10s} {row['method']:9s} n={row['n_seeds']}  "
          f"test acc {row['test_acc_mean']:.4f} +- {row['test_acc_se']:.4f}  "
          f"log evidence {row['marglik_total_mean']:10.1f}")

# %% [markdown]
# ## Which generator does the evidence widen?
#
# The components are: shift x, shift y, rotation, scale x, scale y, shear.
# On fully rotated digits only the rotation should grow large.

# %%
names = ["shift x", "shift y", "rotate", "scale x", "scale y", "shear"]
for path, rec in results.items():
    if rec["method"] != "marglik":
        continue
    widths = ", ".join(f"{n} {w:.3f}" for n, w in zip(names, rec["final_abs_eta"]))
    print(f"{rec['transform']:10s} seed {rec['seed']}: {widths}")

# %% [markdown]
# ## Sampled transforms at the learned width
#
# The same matrices `python3 -m auglaplace dump-transforms --result ...` writes.

# %%
for path, rec in results.items():
    if rec["method"] == "marglik" and rec["transform"] == "FullRot":
        T, _ = cli.affine_matrix(np.array(rec["final_eta"]), cli.sample_eps(np.random.default_rng(0), 500, 6))
        angles = np.degrees(np.arctan2(T[:, 1, 0], T[:, 0, 0]))
        print(f"seed {rec['seed']}: rotation angles span {angles.min():.0f} to {angles.max():.0f} degrees")
