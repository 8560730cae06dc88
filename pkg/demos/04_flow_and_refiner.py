# %% [markdown]
# # Flow matching and refiner conditioning
#
# z_sigma = (1 - sigma) z0 + sigma eps, and the model predicts v = eps - z0.
# From a predicted velocity the clean latent is z0_hat = z_sigma - sigma v_hat.
# The refiner is conditioned on eps - v_hat, which equals z0 when the
# prediction is perfect and carries the model's own error otherwise.

# %%
import numpy as np
from fsv.flow import deviation_estimate, make_flow_sample, sample_sigma, z0_tilde_ratio_form
from fsv.numerics import Rng

rng = Rng(0)
s = make_flow_sample(rng.normal((4, 3, 2, 2)), rng)
e = deviation_estimate(s, s.v_target + 0.1 * rng.normal(s.z0.shape))
print("sigma", round(s.sigma, 3))
print("two forms agree to", np.abs(e.z0_tilde - z0_tilde_ratio_form(e, s)).max())
print("perturbation scale", np.abs(e.z0_tilde - s.z0).mean())

# %%
draws = sample_sigma(Rng(1), size=100000)
print("logit-normal median", np.median(draws))

# %% [markdown]
# ## Channel layout
#
# The refiner input stacks noise, the condition clip and a mask channel.
# Frame 0 carries the first-frame latent with mask 1. Later frames carry the
# upsampled low-resolution clip with a confidence between 0.2 and 0.8 that
# reflects how well the upsampler reproduced the first frame.

# %%
from fsv.flow import assemble_refiner_input, dynamic_mask

noise, first, low = rng.normal((4, 4, 2, 2)), rng.normal((4, 1, 2, 2)), rng.normal((4, 4, 2, 2))
print(assemble_refiner_input(noise, first)[-1, :, 0, 0])
mask = dynamic_mask(low[:, :1], low[:, :1] + 0.05, n_frames=4)
x = assemble_refiner_input(noise, first, low, mask)
print(x.shape, x[-1, :, 0, 0])
