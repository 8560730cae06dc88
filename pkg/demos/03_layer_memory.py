# %% [markdown]
# # Layer memory
#
# Each DIT layer l >= 2 mixes all earlier representations with per-token
# router weights before forming keys and values. A router that puts all
# weight on the previous layer gives back the plain transformer.

# %%
import numpy as np
from fsv.dit import DitConfig, LayerMemoryDiT, router_heatmap
from fsv.numerics import Rng, Tensor

kw = dict(layers=4, dim=16, heads=2, in_channels=3, out_channels=3, ctx_dim=8)
z = Tensor(Rng(0).normal((2, 3, 2, 4, 4)))
sigma = np.array([0.3, 0.7])
base = LayerMemoryDiT(DitConfig(layer_memory=False, **kw), Rng(1))
onehot = LayerMemoryDiT(DitConfig(router_mode="one_hot_last", **kw), Rng(1))
print("one-hot vs baseline", np.abs(base(z, sigma).data - onehot(z, sigma).data).max())

# %% [markdown]
# The routers add D·l + l parameters at layer l and nothing else.

# %%
learned = LayerMemoryDiT(DitConfig(**kw), Rng(1))
print(learned.router_parameter_count(), learned.num_parameters() - base.num_parameters())

# %% [markdown]
# The heatmap holds the maximum router weight for each (layer, source) pair;
# -1 marks sources that do not exist yet. At initialization the +5 bias
# puts nearly all weight on the previous layer.

# %%
learned(z, sigma)
print(np.round(router_heatmap(learned.last_state, 4), 3))
