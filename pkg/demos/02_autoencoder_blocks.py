# %% [markdown]
# # Autoencoder building blocks
#
# The encoder is causal in time: latent frame j only depends on input frames
# up to 2j for a temporal factor of 2. That makes chunked encoding exact.

# %%
import numpy as np
from fsv.autoencoder import AEConfig, Autoencoder, ConvMode, conv3d_mode
from fsv.numerics import Rng, Tensor

cfg = AEConfig(latent_channels=8, block_channels=(16, 16), block_factors=((1, 2, 2), (2, 2, 2)),
               attention=(False, True), decoder_modes=("non_causal", "non_causal"), inject_blocks=1)
ae = Autoencoder(cfg, Rng(0))
v = Rng(1).normal((3, 9, 16, 16))
lat, feats = ae.encode(Tensor(v))
print("latent", lat.shape, "compression 1:%g" % (v.size / lat.z.data.size))

# %%
chunked = ae.encode_chunked(Tensor(v), (3, 2, 2, 2))[0].z.data
print("chunked vs full", np.abs(chunked - lat.z.data).max())

# %% [markdown]
# Perturbing input frame 5 leaves latent frames 0-2 untouched.

# %%
w = v.copy()
w[:, 5] += 1.0
z2 = ae.encode(Tensor(w))[0].z.data
print([float(np.abs(z2[:, j] - lat.z.data[:, j]).max()) for j in range(5)])

# %% [markdown]
# ## Group-causal convolution
#
# Frames are split into groups after the first frame. Inside a group the
# kernel sees real frames; frames of later groups are replaced by the group's
# last frame, so each group is decoded without waiting for the next.

# %%
x = Rng(2).normal((1, 5, 1, 1))
k = np.zeros((1, 1, 3, 1, 1))
k[0, 0, 2] = 1.0  # pick the next frame
for mode in ("causal", "group_causal:2", "non_causal"):
    out = conv3d_mode(Tensor(x), Tensor(k), None, ConvMode.parse(mode)).data.ravel()
    print(f"{mode:15s}", np.round(out, 3))
print("input          ", np.round(x.ravel(), 3))

# %% [markdown]
# Decoding with first-frame injection starts out identical to decoding
# without it, because the cross-attention output projection is zero.

# %%
print(np.abs(ae.decode(lat, feats).data - ae.decode(lat, None).data).max())
