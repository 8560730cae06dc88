import json

import numpy as np
import pytest

from fsv import cli
from fsv.harness import ExperimentConfig, config_hash, load_flat
from fsv.harness import experiments as ex
from fsv.harness.data import SyntheticVideoSource
from fsv.numerics import Rng, save

AB_TOML = """
experiment = "ab_loss"
seeds = [0, 1, 2, 3, 4]
steps = 4
out_dir = "{out}"

[dit]
layers = 3
dim = 8
heads = 2
ctx_dim = 4

[data]
batch = 1
text_tokens = 2
"""


def body(path):
    """File contents without the generated-at header line."""
    return [l for l in path.read_text().splitlines() if not l.startswith("#")]


# -- configuration ------------------------------------------------------------------------

def test_config_load_and_hash(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(AB_TOML.format(out=tmp_path / "o"))
    flat = load_flat(p)
    assert flat["dit.layers"] == 3 and flat["seeds"] == [0, 1, 2, 3, 4]
    cfg = ExperimentConfig.load(p)
    assert cfg.kind == "ab_loss" and cfg.section("dit")["dim"] == 8
    assert cfg.hash() == config_hash(cfg.to_flat())
    assert ExperimentConfig.from_flat(cfg.to_flat()).hash() == cfg.hash()
    other = ExperimentConfig.from_flat({**cfg.to_flat(), "dit.dim": 16})
    assert other.hash() != cfg.hash()


def test_config_section_is_a_copy():
    cfg = ExperimentConfig("ab_loss", modules={"dit": {"dim": 8}})
    cfg.section("dit").pop("dim")
    assert cfg.section("dit") == {"dim": 8}


@pytest.mark.parametrize("kw", [dict(kind="nope"), dict(kind="ab_loss", seeds=[]), dict(kind="ab_loss", steps=0)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw)


def test_undotted_key_rejected():
    with pytest.raises(ValueError):
        ExperimentConfig.from_flat({"experiment": "ab_loss", "lr": 1.0})


def test_unknown_section_key_rejected():
    with pytest.raises(ValueError):
        ex.dit_config({"depth": 3})


# -- synthetic data --------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["moving-blobs", "low-rank-dynamics", "textured-noise"])
def test_sources_deterministic(kind):
    a = SyntheticVideoSource(kind).sample(3)
    b = SyntheticVideoSource(kind).sample(3)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (3, 5, 16, 16) and np.abs(a).max() < 1.5
    assert not np.array_equal(a, SyntheticVideoSource(kind).sample(4))


def test_low_rank_source_has_known_dimension():
    from fsv import geometry as G
    src = SyntheticVideoSource(latent_dim_true=3, frames=3, height=8, width=8)
    X = src.batch(range(2000)).reshape(2000, -1)
    for d in G.id_profile(X, [1, 2]):
        assert 2.5 < d < 3.5


def test_unknown_source_kind():
    with pytest.raises(ValueError):
        SyntheticVideoSource("static")


# -- A/B experiment ----------------------------------------------------------------------------

def ab_config(out, **modules):
    base = {"dit": dict(layers=3, dim=8, heads=2, ctx_dim=4), "data": dict(batch=1, text_tokens=2)}
    for k, v in modules.items():
        base.setdefault(k, {}).update(v)
    return ExperimentConfig("ab_loss", seeds=[0, 1, 2, 3, 4], out_dir=str(out), steps=3, modules=base)


def test_ab_summary_rows_and_streams(tmp_path):
    res = ex.run_ab_loss_experiment(ab_config(tmp_path))
    summary = ex.read_csv(res["paths"]["summary"])
    assert len(summary) == 10
    assert {(int(r["seed"]), r["arm"]) for r in summary} == {(s, a) for s in range(5) for a in ("baseline", "memory")}
    base = ex.read_csv(res["paths"]["baseline"])
    mem = ex.read_csv(res["paths"]["memory"])
    assert [r["checksum"] for r in base] == [r["checksum"] for r in mem]
    assert 0 <= res["memory_wins"] <= 5
    assert json.loads((tmp_path / "manifest.json").read_text())["config_hash"] == ab_config(tmp_path).hash()


def test_ab_one_hot_arm_matches_baseline(tmp_path):
    res = ex.run_ab_loss_experiment(ab_config(tmp_path, ab={"memory_router_mode": "one_hot_last"}))
    for s in range(5):
        a = np.array(res["runs"][(s, "baseline")].losses)
        b = np.array(res["runs"][(s, "memory")].losses)
        np.testing.assert_allclose(b, a, atol=1e-9, rtol=0)


def test_ab_rerun_byte_identical(tmp_path):
    r1 = ex.run_ab_loss_experiment(ab_config(tmp_path / "a"))
    r2 = ex.run_ab_loss_experiment(ab_config(tmp_path / "a"))
    for key in ("baseline", "memory", "summary"):
        assert r1["paths"][key].read_text().splitlines()[1:] == r2["paths"][key].read_text().splitlines()[1:]
    m1 = (tmp_path / "a" / "manifest.json").read_bytes()
    ex.run_ab_loss_experiment(ab_config(tmp_path / "a"))
    assert (tmp_path / "a" / "manifest.json").read_bytes() == m1


def test_ab_arm_mismatch_rejected():
    a = ex.dit_config({}, layer_memory=False)
    with pytest.raises(ValueError):
        ex.check_ab_arms(a, ex.dit_config({"dim": 16}, layer_memory=True))
    ex.check_ab_arms(a, ex.dit_config({}, layer_memory=True))


def test_final_loss_window():
    run = ex.DitRun(None, list(range(20)), [], [])
    assert run.final_loss(0.1) == 18.5


# -- ID comparison ---------------------------------------------------------------------------------

def test_id_comparison_smoke(tmp_path):
    cfg = ExperimentConfig("id_compare", seeds=[0], out_dir=str(tmp_path), steps=2,
                           modules={"id": {"n_eval": 60, "ks": [1, 2, 4]}, "data": {"kind": "low-rank-dynamics"}})
    res = ex.run_id_comparison(cfg)
    rows = res["path"].read_text().splitlines()
    header = rows[1].split(",")
    assert header == ["label", "k=1", "k=2", "k=4"]
    data = [r.split(",") for r in rows[2:]]
    assert len(data) == 4 and all(len(r) == 1 + 3 for r in data)
    assert all(np.isfinite(float(x)) for r in data for x in r[1:])


def test_untrained_encoder_finite_ids():
    from fsv import geometry as G
    from fsv.autoencoder import Autoencoder
    ae = Autoencoder(ex.ae_config({}), Rng(0))
    src = SyntheticVideoSource()
    cloud = G.flatten_latents(ex.encode_set(ae, src, range(80)), "video")
    assert all(np.isfinite(G.id_profile(cloud, [1, 2, 4])))


# -- compression table ---------------------------------------------------------------------------

def test_compression_table_rows():
    table = ex.emit_compression_table()
    assert ["FSAE-Standard", "64x64x4", 128, 384] in table
    assert ["LTX-Video", "32x32x8", 128, 192] in table
    assert ["Cosmos-CV", "8x8x8", 16, 96] in table


def test_cli_compress_table(tmp_path, capsys):
    assert cli.main(["compress-table"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "model,downsample_factor,latent_channels,total_compression"
    assert any(line.endswith(",384") for line in out)
    spec = tmp_path / "spec.csv"
    spec.write_text("name,f_h,f_w,f_t,c\nmine,16,16,4,32\n")
    target = tmp_path / "t.csv"
    assert cli.main(["compress-table", "--spec", str(spec), "--out", str(target)]) == 0
    assert target.read_text().splitlines()[1] == "mine,16x16x4,32,96"


# -- other subcommands -----------------------------------------------------------------------------

def test_cli_id_estimate(tmp_path, capsys):
    pts = tmp_path / "p.fsvt"
    save(pts, Rng(0).uniform((600, 3)) @ Rng(1).normal((3, 6)))
    assert cli.main(["id-estimate", "--points", str(pts), "--ks", "1,2,4"]) == 0
    head, vals = capsys.readouterr().out.splitlines()
    assert head == "k=1,k=2,k=4"
    assert all(2.3 < float(v) < 3.5 for v in vals.split(","))


def test_cli_flow_identities(capsys):
    assert cli.main(["flow-identities", "--trials", "20"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_cli_gradcheck_subset(capsys, monkeypatch):
    from fsv.harness import suites
    monkeypatch.setattr(suites, "GRAD_CASES", {k: suites.GRAD_CASES[k] for k in ("pixel_norm", "pseudo_huber")})
    assert cli.main(["gradcheck-all", "--seeds", "0"]) == 0
    assert "2/2 checks passed" in capsys.readouterr().out


def test_cli_train_dit_and_heatmap(tmp_path, capsys):
    cfg = tmp_path / "d.toml"
    cfg.write_text("[dit]\nlayers = 3\ndim = 8\nheads = 2\nctx_dim = 4\n[data]\nbatch = 1\n")
    out = tmp_path / "run"
    args = ["train-dit", "--config", str(cfg), "--out-dir", str(out), "--steps", "3", "--seed", "1"]
    assert cli.main(args + ["--layer-memory", "on"]) == 0
    rows = body(out / "loss.csv")
    assert rows[0] == "step,loss,wallclock" and len(rows) == 4
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and manifest["layer_memory"] is True and "numpy" in manifest["versions"]
    hm = tmp_path / "hm.csv"
    assert cli.main(["router-heatmap", "--ckpt", str(out / "ckpt"), "--out", str(hm)]) == 0
    lines = hm.read_text().splitlines()
    assert lines[0] == "layer,j=0,j=1,j=2"
    assert lines[1].startswith("2,") and lines[1].endswith(",-1")
    assert len(lines) == 3
    losses = [r.split(",")[1] for r in rows[1:]]
    assert cli.main(args + ["--layer-memory", "on"]) == 0
    assert [r.split(",")[1] for r in body(out / "loss.csv")[1:]] == losses


def test_cli_heatmap_rejects_baseline(tmp_path):
    cfg = tmp_path / "d.toml"
    cfg.write_text("[dit]\nlayers = 2\ndim = 8\nheads = 2\nctx_dim = 4\n")
    out = tmp_path / "run"
    assert cli.main(["train-dit", "--config", str(cfg), "--out-dir", str(out), "--steps", "1",
                     "--layer-memory", "off"]) == 0
    with pytest.raises(SystemExit):
        cli.main(["router-heatmap", "--ckpt", str(out / "ckpt")])


def test_cli_train_ae(tmp_path):
    out = tmp_path / "ae"
    assert cli.main(["train-ae", "--out-dir", str(out), "--steps", "2", "--vf-loss", "on"]) == 0
    assert len(body(out / "loss.csv")) == 3
    assert (out / "ckpt" / "manifest.json").exists()


def test_cli_train_upsampler(tmp_path):
    cfg = tmp_path / "u.toml"
    cfg.write_text("[upsampler]\nwidth = 4\nn_res_blocks = 1\n[loss]\na1 = 1.0\na2 = 0.0\na3 = 0.0\n"
                   "a3_schedule = []\n")
    out = tmp_path / "up"
    assert cli.main(["train-upsampler", "--config", str(cfg), "--out-dir", str(out), "--steps", "3"]) == 0
    rows = (out / "loss.csv").read_text().splitlines()
    assert rows[0].startswith("step,loss,latent_l1") and len(rows) == 4


def test_cli_dynamic_mask(tmp_path, capsys):
    z = np.zeros((2, 3, 2, 2))
    save(tmp_path / "z.fsvt", z)
    save(tmp_path / "u.fsvt", z + np.array([0.0, 0.5, 1.0])[None, :, None, None])
    assert cli.main(["dynamic-mask", "--z", str(tmp_path / "z.fsvt"), "--z-up", str(tmp_path / "u.fsvt"),
                     "--range", "0.1,0.9"]) == 0
    vals = [float(l.split(",")[1]) for l in capsys.readouterr().out.splitlines()]
    assert vals == [1.0, 0.1, 0.5, 0.9]


def test_cli_rejects_bad_flag():
    with pytest.raises(SystemExit):
        cli.main(["train-dit", "--layer-memory", "maybe"])
