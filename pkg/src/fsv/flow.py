"""Flow-matching objective and refiner conditioning.

Latents are (c, t, h, w) arrays (frames on axis 1); batched latents carry a
leading batch axis.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .numerics import NonFiniteError, Rng, Tensor
from .numerics import tensor as T

SHUFFLE_CATEGORIES = ("adjacent", "nonadjacent", "permute")


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sample_sigma(rng: Rng, loc: float = 0.0, scale: float = 1.0, size=None):
    """Logit-normal noise level: logistic(loc + scale * g), g ~ N(0, 1)."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    g = rng.normal(() if size is None else size)
    s = logistic(loc + scale * g)
    return float(s) if size is None else s


@dataclass
class FlowSample:
    z0: np.ndarray
    eps: np.ndarray
    sigma: float | np.ndarray
    z_sigma: np.ndarray
    v_target: np.ndarray


def _bcast(sigma, like: np.ndarray):
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        return s
    return s.reshape(s.shape + (1,) * (like.ndim - s.ndim))


def make_flow_sample(z0, rng: Rng, loc: float = 0.0, scale: float = 1.0, sigma=None,
                     batched: bool = False) -> FlowSample:
    """z_sigma = (1 - sigma) z0 + sigma eps and v = eps - z0.

    With ``batched`` one sigma is drawn per leading-axis entry.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = rng.normal(z0.shape)
    if sigma is None:
        sigma = sample_sigma(rng, loc, scale, size=(z0.shape[0],) if batched else None)
    s = _bcast(sigma, z0)
    return FlowSample(z0, eps, sigma, (1.0 - s) * z0 + s * eps, eps - z0)


def pseudo_huber(pred, target, c: float = 0.03) -> Tensor:
    """mean(sqrt((pred - target)^2 + c^2) - c)."""
    if c <= 0:
        raise ValueError("c must be positive")
    r = T.as_tensor(pred) - T.as_tensor(target)
    return (T.sqrt(r * r + c * c) - c).mean()


@dataclass
class DeviationEstimate:
    v_hat: np.ndarray
    z0_hat: np.ndarray
    eps_hat: np.ndarray
    z0_tilde: np.ndarray


def deviation_estimate(sample: FlowSample, v_hat) -> DeviationEstimate:
    """Clean-latent estimate from a predicted velocity and the perturbed condition eps - v_hat."""
    v_hat = np.asarray(getattr(v_hat, "data", v_hat), dtype=np.float64)
    s = _bcast(sample.sigma, v_hat)
    z0_hat = sample.z_sigma - s * v_hat
    eps_hat = v_hat + z0_hat
    return DeviationEstimate(v_hat, z0_hat, eps_hat, sample.eps - v_hat)


def z0_tilde_ratio_form(est: DeviationEstimate, sample: FlowSample) -> np.ndarray:
    """(z0_hat - z0) / sigma + z0; equals ``est.z0_tilde`` whenever sigma > 0."""
    s = _bcast(sample.sigma, sample.z0)
    if np.any(s <= 0):
        raise ValueError("ratio form needs sigma > 0")
    return (est.z0_hat - sample.z0) / s + sample.z0


# -- conditioning -------------------------------------------------------------------

@dataclass
class ConditionPack:
    noise: np.ndarray
    condition: np.ndarray
    mask: np.ndarray
    first_frame: bool = True

    def __post_init__(self):
        if np.any(self.mask < 0) or np.any(self.mask > 1):
            raise ValueError("mask values must lie in [0, 1]")
        if self.first_frame and not np.all(self.mask[0] == 1):
            raise ValueError("first-frame mask must be 1 when first-frame conditioning is on")


def normalize_error(err, lo: float = 0.2, hi: float = 0.8) -> np.ndarray:
    """Min-max normalize into [lo, hi]; a constant error maps to the midpoint."""
    if not 0 <= lo < hi <= 1:
        raise ValueError("need 0 <= lo < hi <= 1")
    err = np.asarray(err, dtype=np.float64)
    span = err.max() - err.min()
    if span == 0:
        return np.full(err.shape, 0.5 * (lo + hi))
    return lo + (hi - lo) * (err - err.min()) / span


def upsampling_error(z, z_up, granularity: str = "frame") -> np.ndarray:
    """Mean |z - z_up| per frame (t,) or per location (t, h, w) of (c, t, h, w) latents."""
    z, z_up = np.asarray(z), np.asarray(z_up)
    if z.shape != z_up.shape:
        raise ValueError(f"shape mismatch {z.shape} vs {z_up.shape}")
    err = np.abs(z - z_up)
    if granularity == "frame":
        return err.mean(axis=(0, 2, 3))
    if granularity == "location":
        return err.mean(axis=0)
    raise ValueError(f"unknown granularity {granularity!r}")


def dynamic_mask(z, z_up, lo: float = 0.2, hi: float = 0.8, granularity: str = "frame",
                 n_frames: int | None = None, first_frame: bool = True) -> np.ndarray:
    """Confidence mask for a clip whose frames >= 1 come from upsampled latents.

    The upsampling error of the (z, z_up) pair is normalized over this sample
    into [lo, hi]. If the pair covers fewer frames than the clip (e.g. only the
    first frame was checked) its values are averaged over frames and shared by
    every low-resolution frame. Frame 0 gets 1 when first-frame conditioning is on.
    """
    vals = normalize_error(upsampling_error(z, z_up, granularity), lo, hi)
    n_low = vals.shape[0] if n_frames is None else n_frames - (1 if first_frame else 0)
    if vals.shape[0] != n_low:
        vals = np.broadcast_to(vals.mean(axis=0), (n_low,) + vals.shape[1:])
    if first_frame:
        vals = np.concatenate([np.ones((1,) + vals.shape[1:]), vals], axis=0)
    return np.array(vals)


def frame_shuffle(frames, rng: Rng, p_apply: float = 0.5, ratios=(0.6, 0.3, 0.1)):
    """Randomly reorder frames along axis 1. Returns (frames, category or None).

    With probability ``p_apply`` one of: swap an adjacent pair, swap two
    nonadjacent frames, or permute the whole clip, chosen by ``ratios``.
    Clips too short for a category drop it and renormalize the rest.
    """
    frames = np.asarray(frames)
    t = frames.shape[1]
    if rng.random() >= p_apply or t < 2:
        return frames, None
    ratios = np.array(ratios, dtype=np.float64)
    if t < 3:
        ratios[1] = 0.0
    ratios = ratios / ratios.sum()
    cat = SHUFFLE_CATEGORIES[rng.choice(3, p=ratios)]
    order = np.arange(t)
    if cat == "adjacent":
        i = int(rng.integers(0, t - 1))
        order[[i, i + 1]] = order[[i + 1, i]]
    elif cat == "nonadjacent":
        while True:
            i, j = sorted(int(x) for x in rng.integers(0, t, 2))
            if j - i >= 2:
                break
        order[[i, j]] = order[[j, i]]
    else:
        order = rng.permutation(t)
    return frames[:, order], cat


def condition_dropout(pack: ConditionPack, rng: Rng, p_drop: float = 0.1):
    """With probability p_drop zero the low-resolution condition frames and their mask."""
    if not 0 <= p_drop <= 1:
        raise ValueError("p_drop must lie in [0, 1]")
    if rng.random() >= p_drop:
        return pack, False
    cond = pack.condition.copy()
    mask = pack.mask.copy()
    start = 1 if pack.first_frame else 0
    cond[:, start:] = 0.0
    mask[start:] = 0.0
    return replace(pack, condition=cond, mask=mask), True


def random_frame_replace(pack: ConditionPack, real: np.ndarray, rng: Rng, p: float = 0.1) -> ConditionPack:
    """Swap random condition frames for real high-resolution latents and set their mask to 1."""
    t = pack.condition.shape[1]
    hit = rng.uniform((t,)) < p
    if pack.first_frame:
        hit[0] = False
    if not hit.any():
        return pack
    cond = pack.condition.copy()
    mask = pack.mask.copy()
    cond[:, hit] = real[:, hit]
    mask[hit] = 1.0
    return replace(pack, condition=cond, mask=mask)


def assemble_refiner_input(noise, first_frame_latent, lowres_latent=None, masks=None) -> np.ndarray:
    """Channel stack [noise | condition | mask] of shape (2c + 1, t, h, w).

    Condition frame 0 is the first-frame latent, later frames the low-resolution
    (upsampled) latent or zeros. Without ``masks`` the image-to-video layout
    [1, 0, ..., 0] is used.
    """
    noise = np.asarray(noise, dtype=np.float64)
    c, t, h, w = noise.shape
    first = np.asarray(first_frame_latent, dtype=np.float64)
    if first.ndim == 3:
        first = first[:, None]
    if first.shape[0] != c or first.shape[2:] != (h, w):
        raise ValueError(f"first-frame latent {first.shape} does not match noise {noise.shape}")
    cond = np.zeros_like(noise)
    if lowres_latent is not None:
        lowres = np.asarray(lowres_latent, dtype=np.float64)
        if lowres.shape != noise.shape:
            raise ValueError(f"low-resolution latent {lowres.shape} does not match noise {noise.shape}")
        cond[:, 1:] = lowres[:, 1:]
    cond[:, 0] = first[:, 0]
    if masks is None:
        masks = np.zeros(t)
        masks[0] = 1.0
    masks = np.asarray(masks, dtype=np.float64)
    if masks.shape == (t,):
        m = np.broadcast_to(masks[:, None, None], (t, h, w))
    elif masks.shape == (t, h, w):
        m = masks
    else:
        raise ValueError(f"mask shape {masks.shape} fits neither (t,) nor (t, h, w)")
    return np.concatenate([noise, cond, m[None]], axis=0)


# -- training --------------------------------------------------------------------------

@dataclass
class FlowConfig:
    loc: float = 0.0
    scale: float = 1.0
    huber_c: float = 0.03


def train_step(model, opt, z0, rng: Rng, cfg: FlowConfig = FlowConfig(), text_ctx=None, image_ctx=None,
               extra_channels=None) -> float:
    """One optimizer update on a batch of clean latents (B, c, t, h, w); returns the loss."""
    sample = make_flow_sample(z0, rng, cfg.loc, cfg.scale, batched=True)
    inp = sample.z_sigma if extra_channels is None else np.concatenate([sample.z_sigma, extra_channels], axis=1)
    opt.zero_grad()
    try:
        v_pred = model(Tensor(inp), sample.sigma, text_ctx, image_ctx)
        loss = pseudo_huber(v_pred, sample.v_target, cfg.huber_c)
        loss.backward()
    except NonFiniteError as exc:
        raise NonFiniteError(f"{exc} (sigma={np.round(sample.sigma, 4).tolist()})") from exc
    opt.step()
    return float(loss.data)


@dataclass
class RefinerConfig:
    mask_range: tuple = (0.2, 0.8)
    mask_granularity: str = "frame"
    p_shuffle: float = 0.5
    shuffle_ratios: tuple = (0.6, 0.3, 0.1)
    p_drop: float = 0.1
    p_replace: float = 0.1


def build_refiner_pack(noise, first_frame_latent, lowres, first_pair, real, rng: Rng,
                       cfg: RefinerConfig = RefinerConfig()):
    """Training-time condition for the high-resolution refiner.

    ``lowres`` is the (deviation-perturbed, upsampled) low-resolution clip,
    ``first_pair`` the (z, z_up) pair whose error sets the mask confidence, and
    ``real`` the ground-truth high-resolution latent used for frame replacement.
    Returns the assembled (2c + 1, t, h, w) input and the final ConditionPack.
    """
    noise = np.asarray(noise, dtype=np.float64)
    t = noise.shape[1]
    r_shuffle, r_drop, r_replace = rng.split(3)
    shuffled, _ = frame_shuffle(np.asarray(lowres)[:, 1:], r_shuffle, cfg.p_shuffle, cfg.shuffle_ratios)
    cond = np.concatenate([np.asarray(first_frame_latent).reshape(noise.shape[0], 1, *noise.shape[2:]), shuffled], 1)
    mask = dynamic_mask(*first_pair, *cfg.mask_range, granularity=cfg.mask_granularity, n_frames=t)
    pack = ConditionPack(noise, cond, mask)
    pack, _ = condition_dropout(pack, r_drop, cfg.p_drop)
    pack = random_frame_replace(pack, np.asarray(real), r_replace, cfg.p_replace)
    return assemble_refiner_input(pack.noise, pack.condition[:, :1], pack.condition, pack.mask), pack
