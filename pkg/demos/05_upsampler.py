# %% [markdown]
# # Latent upsampler
#
# A low-resolution latent is projected to 4x its channels, shuffled into a
# grid twice as fine, and refined by residual blocks. Training pairs come from
# encoding a clip and its bicubic half-size copy with the same frozen
# autoencoder.

# %%
import numpy as np
from fsv.harness.config import ExperimentConfig
from fsv.harness.experiments import run_upsampler
from fsv.upsampler import UpsampleLossWeights, bicubic_down

print(bicubic_down(np.full((3, 1, 8, 8), 0.4)).data[0, 0])

# %% [markdown]
# The perceptual weight ramps linearly from 0.1 to 1.0.

# %%
w = UpsampleLossWeights()
print([round(w.a3_at(s), 3) for s in (0, 25, 50, 75, 100, 200)])

# %% [markdown]
# Overfitting one pair drives the latent L1 error down quickly when the
# latent term dominates. With a random frozen decoder the pixel terms pull
# in a different direction, so they are kept small here.

# %%
cfg = ExperimentConfig("train_upsampler", steps=300, modules={
    "upsampler": {"width": 32, "n_res_blocks": 2}, "train": {"lr": 1e-3},
    "loss": {"a1": 1.0, "a2": 0.01, "a3": 0.0, "a3_schedule": []}})
m = run_upsampler(cfg, seed=0)
print("initial loss", round(m["initial_loss"], 4), "latent L1 after 300 steps", round(m["latent_l1"], 4))
