"""``fsv`` command line entry point."""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import geometry
from .dit import DitConfig, LayerMemoryDiT, router_heatmap
from .flow import dynamic_mask
from .harness import experiments as ex
from .harness.config import ExperimentConfig, write_manifest
from .harness.suites import flow_identity_suite, grad_suite
from .numerics import Rng, Tensor, load, load_checkpoint, no_grad, save_checkpoint


def _ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _on_off(text: str) -> bool:
    if text not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return text == "on"


def _config(args, kind: str) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config, kind) if args.config else ExperimentConfig(kind)
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "steps", None):
        cfg.steps = args.steps
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    return cfg


def _writer(path):
    if path in (None, "-"):
        return sys.stdout, False
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return open(path, "w", newline=""), True


def cmd_compress_table(args) -> int:
    rows = ex.read_compression_spec(args.spec) if args.spec else None
    table = ex.emit_compression_table(rows)
    fh, close = _writer(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["model", "downsample_factor", "latent_channels", "total_compression"])
    w.writerows(table)
    if close:
        fh.close()
    return 0


def cmd_id_estimate(args) -> int:
    pts = load(args.points)
    if pts.ndim != 2:
        pts = geometry.flatten_latents(pts, args.flatten)
    ks = _ints(args.ks)
    prof = geometry.id_profile(pts, ks)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow([f"k={k}" for k in ks])
    w.writerow([f"{d:.6f}" for d in prof])
    return 0


def cmd_id_compare(args) -> int:
    cfg = _config(args, "id_compare")
    res = ex.run_id_comparison(cfg)
    print(res["path"].read_text(), end="")
    return 0


def cmd_train_ae(args) -> int:
    cfg = _config(args, "train_ae")
    ae_cfg = ex.ae_config(cfg.section("ae"))
    vf = cfg.section("vf")
    lr = float(vf.pop("lr", 3e-3))
    source = ex.source_from(cfg.section("data"), kind="textured-noise")
    seed = cfg.seeds[0]
    out = Path(cfg.out_dir)
    rows = []
    run = ex.train_ae(ae_cfg, seed, cfg.steps, source, vf=args.vf_loss, lr=lr, **vf,
                      log=lambda s, l: rows.append([s, ex.fmt(l)]))
    ex.write_csv(out / "loss.csv", ["step", "loss"], rows, "train_ae", cfg.hash())
    save_checkpoint(out / "ckpt", run.ae.state_dict(), {"ae": cfg.section("ae"), "seed": seed, "vf": args.vf_loss})
    write_manifest(out, cfg, seed, {"vf_loss": args.vf_loss})
    print(f"final loss {run.losses[-1]:.6f}; wrote {out}")
    return 0


def cmd_train_dit(args) -> int:
    cfg = _config(args, "train_dit")
    dsec = cfg.section("dit")
    dsec["layer_memory"] = args.layer_memory
    dit_cfg = ex.dit_config(dsec)
    data = cfg.section("data")
    batch = int(data.pop("batch", 2))
    text_tokens = int(data.pop("text_tokens", 0))
    task = ex.LatentTask(ex.source_from(data, frames=3, height=4, width=4), batch, text_tokens, dit_cfg.ctx_dim)
    train = cfg.section("train")
    seed = cfg.seeds[0]
    out = Path(cfg.out_dir)
    run = ex.train_dit(dit_cfg, seed, cfg.steps, task, float(train.get("lr", 1e-3)),
                       ex._typed(ex.FlowConfig, cfg.section("flow")))
    rows = [[i, ex.fmt(l), f"{t:.4f}"] for i, (l, t) in enumerate(zip(run.losses, run.wallclock))]
    ex.write_csv(out / "loss.csv", ["step", "loss", "wallclock"], rows, "train_dit", cfg.hash())
    ex.save_dit(out / "ckpt", run, dit_cfg, {"data": cfg.section("data"), "seed": seed})
    write_manifest(out, cfg, seed, {"layer_memory": args.layer_memory})
    print(f"final loss {run.final_loss():.6f}; wrote {out}")
    return 0


def cmd_train_upsampler(args) -> int:
    cfg = _config(args, "train_upsampler")
    seed = cfg.seeds[0]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loss.csv", "w", newline="") as fh:
        m = ex.run_upsampler(cfg, seed, csv_out=fh)
    save_checkpoint(out / "ckpt", m["model"].state_dict(), {"upsampler": cfg.section("upsampler"), "seed": seed})
    write_manifest(out, cfg, seed)
    print(f"latent L1 {m['latent_l1']:.6f}; wrote {out}")
    return 0


def cmd_router_heatmap(args) -> int:
    params, meta = load_checkpoint(args.ckpt)
    if "dit" not in meta:
        raise SystemExit(f"{args.ckpt} is not a DIT checkpoint")
    cfg = DitConfig(**meta["dit"])
    if not cfg.layer_memory:
        raise SystemExit("checkpoint has no layer memory; nothing to plot")
    model = LayerMemoryDiT(cfg, Rng(0))
    model.load_state_dict(params)
    data = dict(meta.get("data", {}))
    data.pop("batch", None)
    data.pop("text_tokens", None)
    task = ex.LatentTask(ex.source_from(data, frames=3, height=4, width=4), batch=args.batch)
    with no_grad():
        model(Tensor(task.batch_at(int(meta.get("seed", 0)), 10 ** 6)), np.full(args.batch, args.sigma))
    hm = router_heatmap(model.last_state, cfg.layers)
    fh, close = _writer(args.out)
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["layer"] + [f"j={j}" for j in range(cfg.layers)])
    for i, row in enumerate(hm):
        w.writerow([i + 2] + ["-1" if x == -1 else f"{x:.6f}" for x in row])
    if close:
        fh.close()
    return 0


def cmd_flow_identities(args) -> int:
    res = flow_identity_suite(args.trials, args.seed)
    worst = max(res.values())
    for k, v in res.items():
        print(f"{k:16s} {v:.3e}")
    ok = worst < 1e-12
    print(f"max residual {worst:.3e} {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_gradcheck_all(args) -> int:
    results = grad_suite(tuple(_ints(args.seeds)))
    for r in results:
        print(f"{r.name:30s} seed={r.seed} rel_err={r.rel_err:.2e} {'ok' if r.ok else 'FAIL'}")
    bad = [r for r in results if not r.ok]
    print(f"{len(results) - len(bad)}/{len(results)} checks passed")
    return 1 if bad else 0


def cmd_dynamic_mask(args) -> int:
    lo, hi = (float(x) for x in args.range.split(","))
    mask = dynamic_mask(load(args.z), load(args.z_up), lo, hi, args.granularity, args.frames)
    w = csv.writer(sys.stdout, lineterminator="\n")
    for i, m in enumerate(mask):
        w.writerow([i] + [f"{x:.6f}" for x in np.ravel(m)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fsv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(fn=fn)
        return sp

    def add_run(sp, seed=True):
        sp.add_argument("--config", help="flat TOML config file")
        sp.add_argument("--out-dir")
        sp.add_argument("--steps", type=int)
        if seed:
            sp.add_argument("--seed", type=int)

    sp = add("compress-table", cmd_compress_table, "total compression ratio table as CSV")
    sp.add_argument("--spec", help="CSV with columns name,f_h,f_w,f_t,c (default: built-in table)")
    sp.add_argument("--out", default="-")

    sp = add("id-estimate", cmd_id_estimate, "Gride intrinsic dimension of an FSVT point cloud")
    sp.add_argument("--points", required=True)
    sp.add_argument("--ks", default="2,4,8,16,32,64")
    sp.add_argument("--flatten", default="video", choices=("video", "token"),
                    help="how to turn a latent stack into points when the file is not 2-D")

    sp = add("id-compare", cmd_id_compare, "VF on/off toy autoencoders, Gride profiles")
    add_run(sp, seed=False)

    sp = add("train-ae", cmd_train_ae, "train a toy autoencoder")
    add_run(sp)
    sp.add_argument("--vf-loss", type=_on_off, default=False)

    sp = add("train-dit", cmd_train_dit, "flow-matching training of a toy DIT")
    add_run(sp)
    sp.add_argument("--layer-memory", type=_on_off, default=True)

    sp = add("train-upsampler", cmd_train_upsampler, "train the latent upsampler")
    add_run(sp)

    sp = add("router-heatmap", cmd_router_heatmap, "max router weight per (layer, source) as CSV")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--out", default="-")
    sp.add_argument("--sigma", type=float, default=0.5)
    sp.add_argument("--batch", type=int, default=2)

    sp = add("flow-identities", cmd_flow_identities, "residuals of the flow-matching identities")
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("gradcheck-all", cmd_gradcheck_all, "finite-difference check of every differentiable block")
    sp.add_argument("--seeds", default="0,1,2")

    sp = add("dynamic-mask", cmd_dynamic_mask, "refiner confidence mask from an upsampling-error pair")
    sp.add_argument("--z", required=True)
    sp.add_argument("--z-up", required=True)
    sp.add_argument("--range", default="0.2,0.8")
    sp.add_argument("--granularity", default="frame", choices=("frame", "location"))
    sp.add_argument("--frames", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
