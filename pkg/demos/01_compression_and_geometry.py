# %% [markdown]
# # Compression accounting and intrinsic dimension
#
# A video autoencoder that shrinks height, width and time by (f_h, f_w, f_t)
# and keeps c latent channels stores 3·f_h·f_w·f_t / c times fewer numbers
# than the RGB clip.

# %%
from fsv import geometry as G
from fsv.harness.experiments import emit_compression_table

for row in emit_compression_table():
    print(f"{row[0]:20s} {row[1]:>9s} c={row[2]:<4d} 1:{row[3]}")

# %% [markdown]
# The latent grid of a 120-frame 512x512 clip at 64x64x4 compression has
# 31 x 8 x 8 locations, so a (1, 1, 1) patchify gives that many DIT tokens.

# %%
print(G.sequence_length(120, 512, 512))

# %% [markdown]
# ## Gride
#
# Gride fits a dimension to the ratios of 2k-th to k-th neighbour distances.
# On a flat 5-dimensional torus every neighbourhood is a full ball, so the
# estimate stays at 5 for every k. On a bounded cube, large neighbourhoods
# reach the faces and the estimate drifts down.

# %%
import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import special_ortho_group
from fsv.numerics import Rng

x = Rng(0).uniform((5000, 5))
dist, _ = cKDTree(x, boxsize=1.0).query(x, k=33)
torus = [G.gride_from_mus(G.gride_mus(dist[:, 1:], k), k, d_max=10) for k in (2, 4, 8, 16)]
cube = np.hstack([x, np.zeros((5000, 15))]) @ special_ortho_group.rvs(20, random_state=0).T
print("torus", np.round(torus, 3))
print("cube ", np.round(G.id_profile(cube, [2, 4, 8, 16]), 3))
