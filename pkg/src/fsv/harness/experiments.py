"""Experiment drivers: layer-memory A/B loss curves, VF intrinsic-dimension
comparison, compression table, and the single-run trainers behind the CLI.

Every driver derives all randomness from (seed, stream) pairs, so reruns with
the same config write the same bytes apart from the ``#`` header line.
"""
from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .. import geometry
from ..autoencoder import AEConfig, Autoencoder, ae_loss, squared_error_perceptual
from ..dit import DitConfig, LayerMemoryDiT
from ..flow import FlowConfig, make_flow_sample, pseudo_huber, train_step
from ..nn import AdamW, param
from ..numerics import Rng, Tensor, no_grad, save_checkpoint
from ..upsampler import (LatentUpsampler, UpsampleLossWeights, UpsamplerConfig, UpsamplerTrainConfig, make_pair,
                         train_upsampler)
from ..vf_align import SyntheticTeacher, align_dims, vf_loss
from .config import ExperimentConfig, write_manifest
from .data import SyntheticVideoSource

DEFAULT_KS = (2, 4, 8, 16, 32, 64)

# stream ids; one per independent consumer of randomness
S_DATA, S_FLOW, S_INIT, S_TEXT, S_AE_DATA, S_AE_INIT, S_AE_NOISE, S_VF, S_TEACHER, S_UP = range(20, 30)

TOY_AE = dict(latent_channels=8, block_channels=(16, 16), block_factors=((1, 2, 2), (2, 2, 2)),
              attention=(False, True), decoder_modes=("non_causal", "non_causal"), inject_blocks=1)


def fmt(x: float) -> str:
    return repr(float(x))


def header_line(kind: str, cfg_hash: str) -> str:
    return f"# fsv {kind} config={cfg_hash[:16]} generated={_dt.datetime.now().isoformat(timespec='seconds')}\n"


def write_csv(path, header, rows, kind: str = "", cfg_hash: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(header_line(kind, cfg_hash))
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


def _typed(cls, section: dict, **defaults):
    """Build a config dataclass from a flat section, coercing lists to tuples."""
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kw = dict(defaults)
    for k, v in section.items():
        kw[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
    return cls(**kw)


def ae_config(section: dict) -> AEConfig:
    section = dict(section)
    lite = section.pop("lite", False)
    cfg = _typed(AEConfig, section, **{k: v for k, v in TOY_AE.items() if k not in section})
    return AEConfig.lite(**{f.name: getattr(cfg, f.name) for f in fields(AEConfig)}) if lite else cfg


def dit_config(section: dict, **over) -> DitConfig:
    base = dict(layers=4, dim=32, heads=4, in_channels=3, out_channels=3, ctx_dim=16)
    base.update(section)
    base.update(over)
    return _typed(DitConfig, base)


def source_from(section: dict, **defaults) -> SyntheticVideoSource:
    kw = dict(defaults)
    kw.update(section)
    return _typed(SyntheticVideoSource, kw)


# -- flow-matching task ------------------------------------------------------------------

@dataclass
class LatentTask:
    """Synthetic clean latents: small clips from a generator, used directly as latents."""

    source: SyntheticVideoSource
    batch: int = 2
    text_tokens: int = 0
    ctx_dim: int = 16

    def clip_ids(self, seed: int, step: int) -> np.ndarray:
        return Rng(seed, S_DATA).child(step).integers(0, 2 ** 31 - 1, self.batch)

    def batch_at(self, seed: int, step: int) -> np.ndarray:
        return self.source.batch(self.clip_ids(seed, step))

    def text_at(self, seed: int, step: int):
        if not self.text_tokens:
            return None
        ids = self.clip_ids(seed, step)
        return np.stack([Rng(int(i), S_TEXT).normal((self.text_tokens, self.ctx_dim)) for i in ids])


def stream_checksum(z0: np.ndarray, rng: Rng, flow: FlowConfig, text=None) -> str:
    s = make_flow_sample(z0, rng, flow.loc, flow.scale, batched=True)
    h = hashlib.sha256()
    for a in (z0, s.eps, np.asarray(s.sigma)) + (() if text is None else (text,)):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class DitRun:
    model: LayerMemoryDiT
    losses: list
    checksums: list
    wallclock: list

    def final_loss(self, window: float = 0.1) -> float:
        n = max(1, int(round(len(self.losses) * window)))
        return float(np.mean(self.losses[-n:]))


def train_dit(cfg: DitConfig, seed: int, steps: int, task: LatentTask, lr: float = 1e-3,
              flow: FlowConfig = FlowConfig(), log=None) -> DitRun:
    """Flow-matching training on ``task``; data, noise and init depend only on ``seed``."""
    model = LayerMemoryDiT(cfg, Rng(seed, S_INIT))
    opt = AdamW(model.parameters(), lr=lr)
    losses, sums, clock = [], [], []
    t0 = time.perf_counter()
    for step in range(steps):
        z0 = task.batch_at(seed, step)
        text = task.text_at(seed, step)
        sums.append(stream_checksum(z0, Rng(seed, S_FLOW).child(step), flow, text))
        text_t = None if text is None else Tensor(text)
        losses.append(train_step(model, opt, z0, Rng(seed, S_FLOW).child(step), flow, text_t))
        clock.append(time.perf_counter() - t0)
        if log is not None:
            log(step, losses[-1])
    return DitRun(model, losses, sums, clock)


def check_ab_arms(a: DitConfig, b: DitConfig) -> None:
    da, db = a.to_dict(), b.to_dict()
    diff = {k for k in da if da[k] != db[k]} - {"layer_memory", "router_mode"}
    if diff:
        raise ValueError(f"A/B arms may differ only in layer memory, also differ in {sorted(diff)}")


def run_ab_loss_experiment(config: ExperimentConfig) -> dict:
    """Baseline vs layer-memory DIT on identical data streams and shared initialization.

    Writes loss_baseline.csv, loss_memory.csv (seed, step, loss, checksum) and
    summary.csv (seed, arm, final_loss) with one row per seed and arm.
    """
    ab = config.section("ab")
    window = float(ab.get("final_window", 0.1))
    lr = float(ab.get("lr", 1e-3))
    mode = ab.get("memory_router_mode", "learned")
    dsec = config.section("dit")
    dsec.pop("layer_memory", None)
    base = dit_config(dsec, layer_memory=False)
    mem = dit_config(dsec, layer_memory=True, router_mode=mode)
    check_ab_arms(base, mem)
    data = config.section("data")
    batch = int(data.pop("batch", 2))
    text_tokens = int(data.pop("text_tokens", 0))
    task = LatentTask(source_from(data, frames=3, height=4, width=4), batch, text_tokens, base.ctx_dim)
    flow = _typed(FlowConfig, config.section("flow"))
    out = Path(config.out_dir)
    h = config.hash()
    rows = {"baseline": [], "memory": []}
    summary, runs = [], {}
    for seed in config.seeds:
        for arm, cfg in (("baseline", base), ("memory", mem)):
            run = train_dit(cfg, seed, config.steps, task, lr, flow)
            runs[(seed, arm)] = run
            rows[arm] += [[seed, i, fmt(l), c] for i, (l, c) in enumerate(zip(run.losses, run.checksums))]
            summary.append([seed, arm, fmt(run.final_loss(window))])
        if runs[(seed, "baseline")].checksums != runs[(seed, "memory")].checksums:
            raise RuntimeError(f"arms consumed different data streams for seed {seed}")
    paths = {arm: write_csv(out / f"loss_{arm}.csv", ["seed", "step", "loss", "checksum"], rows[arm], "ab_loss", h)
             for arm in rows}
    paths["summary"] = write_csv(out / "summary.csv", ["seed", "arm", "final_loss"], summary, "ab_loss", h)
    write_manifest(out, config)
    wins = sum(float(runs[(s, "memory")].final_loss(window)) <= float(runs[(s, "baseline")].final_loss(window))
               for s in config.seeds)
    return {"paths": paths, "summary": summary, "runs": runs, "memory_wins": wins}


# -- autoencoder with optional VF alignment ------------------------------------------------

@dataclass
class AERun:
    ae: Autoencoder
    losses: list
    channel_map: Tensor | None


def train_ae(cfg: AEConfig, seed: int, steps: int, source: SyntheticVideoSource, vf: bool = False,
             lr: float = 3e-3, teacher_channels: int = 16, teacher_seed: int = 7, alpha: float = 0.5,
             m1: float = 0.5, m2: float = 0.25, clip_ids=None, log=None) -> AERun:
    """Reconstruction training on one clip per step, optionally with the VF alignment term.

    ``clip_ids`` fixes the training clips (cycled); by default each step draws a fresh clip.
    """
    ae = Autoencoder(cfg, Rng(seed, S_AE_INIT))
    params = ae.parameters()
    W = None
    teacher = None
    if vf:
        teacher = SyntheticTeacher(teacher_channels, Rng(teacher_seed, S_TEACHER))
        W = param(Rng(seed, S_VF).normal((teacher_channels, cfg.latent_channels)) / np.sqrt(cfg.latent_channels))
        params = params + [W]
    opt = AdamW(params, lr=lr)
    ft = cfg.factors[0]
    losses = []
    for step in range(steps):
        if clip_ids is None:
            cid = int(Rng(seed, S_AE_DATA).child(step).integers(0, 2 ** 31 - 1))
        else:
            cid = int(clip_ids[step % len(clip_ids)])
        v = Tensor(source.sample(cid))
        opt.zero_grad()
        lat, feats = ae.encode(v)
        v_hat = ae.decode(lat, feats, Rng(seed, S_AE_NOISE).child(step))
        loss = ae_loss(v, v_hat, squared_error_perceptual)
        if vf:
            pair = align_dims(lat.z, teacher(v), W, pool_kernel=ft, m1=m1, m2=m2, alpha=alpha)
            loss = loss + vf_loss(pair)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
        if log is not None:
            log(step, losses[-1])
    return AERun(ae, losses, W)


def encode_set(ae: Autoencoder, source: SyntheticVideoSource, ids) -> np.ndarray:
    with no_grad():
        return np.stack([ae.encode(Tensor(source.sample(int(i))))[0].z.data for i in ids])


def run_id_comparison(config: ExperimentConfig) -> dict:
    """Toy AE with and without VF alignment; Gride profiles of held-out latents.

    Writes id_profiles.csv with columns label, k=2, ... (1 + |ks| columns):
    one row per (arm, seed) and one mean row per arm.
    """
    idsec = config.section("id")
    ks = tuple(int(k) for k in idsec.get("ks", DEFAULT_KS))
    n_eval = int(idsec.get("n_eval", 400))
    mode = idsec.get("flatten", "video")
    vfsec = config.section("vf")
    lr = float(vfsec.pop("lr", 3e-3))
    cfg = ae_config(config.section("ae"))
    source = source_from(config.section("data"), kind="textured-noise")
    held_out = np.arange(n_eval) + 10 ** 6
    rows, profiles = [], {"vf-off": [], "vf-on": []}
    for seed in config.seeds:
        for arm in ("vf-off", "vf-on"):
            run = train_ae(cfg, seed, config.steps, source, vf=arm == "vf-on", lr=lr, **vfsec)
            cloud = geometry.flatten_latents(encode_set(run.ae, source, held_out), mode)
            prof = geometry.id_profile(cloud, ks)
            profiles[arm].append(prof)
            rows.append([f"{arm} seed={seed}"] + [fmt(d) for d in prof])
    means = {arm: np.mean(p, axis=0) for arm, p in profiles.items()}
    for arm in ("vf-off", "vf-on"):
        rows.append([f"{arm} mean"] + [fmt(d) for d in means[arm]])
    out = Path(config.out_dir)
    path = write_csv(out / "id_profiles.csv", ["label"] + [f"k={k}" for k in ks], rows, "id_compare", config.hash())
    write_manifest(out, config)
    per_seed = [float(np.mean(a)) <= float(np.mean(b)) for a, b in zip(profiles["vf-on"], profiles["vf-off"])]
    return {"path": path, "profiles": profiles, "means": means, "vf_lower_per_seed": per_seed}


# -- tables ---------------------------------------------------------------------------------

def emit_compression_table(rows=None, path=None) -> list[list]:
    """(name, f_h, f_w, f_t, c, ratio) rows; ratio is the 1:N denominator."""
    rows = geometry.TABLE2_ROWS if rows is None else rows
    out = []
    for r in rows:
        name, fh, fw, ft, c = r[:5]
        ratio = geometry.total_compression(geometry.CompressionSpec(int(fh), int(fw), int(ft), int(c)))
        out.append([name, f"{fh}x{fw}x{ft}", c, int(ratio) if float(ratio).is_integer() else ratio])
    if path is not None:
        write_csv(path, ["model", "downsample_factor", "latent_channels", "total_compression"], out,
                  "compress_table", "")
    return out


def read_compression_spec(path) -> list[tuple]:
    """CSV with columns name, f_h, f_w, f_t, c."""
    return [(r["name"], int(r["f_h"]), int(r["f_w"]), int(r["f_t"]), int(r["c"])) for r in read_csv(path)]


# -- upsampler -------------------------------------------------------------------------------

def run_upsampler(config: ExperimentConfig, seed: int, csv_out=None) -> dict:
    """Train a latent upsampler on pairs from a frozen toy autoencoder."""
    cfg = ae_config(config.section("ae"))
    ae = Autoencoder(cfg, Rng(seed, S_AE_INIT))
    usec = config.section("upsampler")
    tsec = config.section("train")
    data = config.section("data")
    n_clips = int(data.pop("n_clips", 1))
    curriculum = tsec.pop("curriculum", None)
    weights = _typed(UpsampleLossWeights, config.section("loss"))
    sources = {}

    def source_for(size):
        key = tuple(size) if size else None
        if key not in sources:
            extra = {} if key is None else {"height": key[0], "width": key[1]}
            sources[key] = source_from({**data, **extra}, kind="moving-blobs", frames=5, height=16, width=16)
        return sources[key]

    cache = {}

    def dataset(step, size):
        key = (tuple(size) if size else None, step % n_clips)
        if key not in cache:
            cache[key] = make_pair(ae, source_for(size).sample(int(Rng(seed, S_UP).child(key[1]).integers(0, 2 ** 31 - 1))))
        return cache[key]

    tcfg = UpsamplerTrainConfig(steps=config.steps, seed=seed, weights=weights,
                                curriculum=tuple((int(s), tuple(sz)) for s, sz in curriculum) if curriculum else ((0, None),),
                                **tsec)
    model = LatentUpsampler(_typed(UpsamplerConfig, usec, c_latent=cfg.latent_channels), Rng(seed, S_INIT))
    metrics = train_upsampler(dataset, tcfg, model, lambda z: ae.decode(z), csv_out=csv_out)
    metrics["model"] = model
    return metrics


def save_dit(path, run: DitRun, cfg: DitConfig, meta: dict) -> None:
    save_checkpoint(path, run.model.state_dict(), {"dit": cfg.to_dict(), **meta})
