from __future__ import annotations

import configparser
import hashlib
import shutil

import filelock
import numpy as np
import pytest

from latentforge.blending import blend, read_generation_manifest
from latentforge.cli import LOCK_NAME, SEED_ENV, load_config, main
from latentforge.core import GrayImage, load_image, read_manifest, save_image
from latentforge.errors import ConfigError, UsageError
from latentforge.evaluation import read_report

TOY_INI = """
[pipeline]
resolution = 32
seed = 5
output_dir = out
background_crops = 4

[train]
steps = 3
batch_size = 2
decoder_width = 8
identity_width = 8
identity_steps = 3
encoder_pretrain_steps = 3
checkpoint_every = 2

[evaluate]
tsne_iter = 60
"""


def write_cfg(d, extra=""):
    p = d / "cfg.ini"
    p.write_text(TOY_INI + extra)
    return str(p)


def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != LOCK_NAME:
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """toycorpus + train, shared by the generate/baseline/evaluate tests."""
    d = tmp_path_factory.mktemp("pipe")
    cfg = write_cfg(d)
    assert main(["toycorpus", "--config", cfg, "--n-fingers", "4", "--per-finger", "3", "--n-backgrounds", "2"]) == 0
    manifest = d / "out" / "toycorpus" / "manifest.csv"
    assert main(["train", "--config", cfg, "--manifest", str(manifest)]) == 0
    return d, cfg, manifest


def test_ingest_counts_and_determinism(tmp_path, capsys):
    root = tmp_path / "data"
    for kind, name in [("sensor", "S1_F1_0"), ("sensor", "S2_F1_0"), ("latent", "S1_F1_1"), ("latent", "S2_F1_1")]:
        save_image(GrayImage.constant(0.5, 32, 32), root / kind / f"{name}.png")
    save_image(GrayImage.constant(0.7, 40, 40), root / "background" / "tile" / "bg.png")
    out = tmp_path / "m.csv"
    assert main(["ingest", "--dir", str(root), "--out", str(out), "--output-dir", str(tmp_path / "o")]) == 0
    assert "sensor=2 latent=2 background=1" in capsys.readouterr().out
    recs = read_manifest(out)
    assert len([r for r in recs if r.kind.value in ("sensor", "latent")]) == 4
    assert [r.surface for r in recs if r.kind.value == "background"] == ["tile"]
    first = out.read_bytes()
    assert main(["ingest", "--dir", str(root), "--out", str(out), "--output-dir", str(tmp_path / "o")]) == 0
    assert out.read_bytes() == first


def test_ingest_bad_name(tmp_path, capsys):
    root = tmp_path / "data"
    save_image(GrayImage.constant(0.5, 32, 32), root / "sensor" / "S1_F1_0.png")
    save_image(GrayImage.constant(0.5, 32, 32), root / "latent" / "oops.png")
    rc = main(["ingest", "--dir", str(root), "--out", str(tmp_path / "m.csv"), "--output-dir", str(tmp_path / "o")])
    assert rc == 3
    assert "oops.png" in capsys.readouterr().err


def test_toycorpus_counts_determinism_and_ingest(tmp_path):
    cfg = write_cfg(tmp_path)
    args = ["toycorpus", "--config", cfg, "--n-fingers", "4", "--per-finger", "3", "--n-backgrounds", "2"]
    assert main(args) == 0
    root = tmp_path / "out" / "toycorpus"
    assert len(list(root.rglob("*.png"))) == 12
    manifest = root / "manifest.csv"
    assert len(manifest.read_text().splitlines()) == 13
    first = digest(tmp_path / "out")
    assert main(args) == 0
    assert digest(tmp_path / "out") == first
    # the generated tree ingests to the same manifest
    again = root / "reingest.csv"
    assert main(["ingest", "--config", cfg, "--dir", str(root), "--out", str(again)]) == 0
    assert again.read_bytes() == manifest.read_bytes()


def test_train_steps_zero(tmp_path, pipeline):
    _, _, manifest = pipeline
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", cfg, "--manifest", str(manifest), "--steps", "0"]) == 0
    assert [p.name for p in (tmp_path / "out" / "train").glob("step_*")] == ["step_0"]


def test_train_outputs(pipeline):
    d, _, _ = pipeline
    train_dir = d / "out" / "train"
    assert sorted(p.name for p in train_dir.glob("step_*")) == ["step_0", "step_2", "step_3"]
    assert len((train_dir / "losses.csv").read_text().splitlines()) == 4


def test_missing_manifest_is_usage_error(tmp_path):
    assert main(["train", "--config", write_cfg(tmp_path), "--manifest", str(tmp_path / "none.csv")]) == 2
    assert main(["train", "--config", str(tmp_path / "none.ini"), "--manifest", "x"]) == 2


def test_generate_contracts(pipeline):
    d, cfg, manifest = pipeline
    base = ["generate", "--config", cfg, "--manifest", str(manifest)]
    assert main(base + ["--count", "0"]) == 0
    path = d / "out" / "synthetic1" / "manifest.csv"
    assert path.read_text() == "synthetic_path,content_path,style_path,background_id,alpha,seed,set_tag\n"

    assert main(base + ["--count", "10"]) == 0
    rows = read_generation_manifest(path)
    assert len(rows) == 10 and all(0.3 <= r.alpha <= 0.8 for r in rows)
    assert all(r.background_id.startswith("plain-") and r.set_tag == "synthetic1" for r in rows)
    first = digest(d / "out" / "synthetic1")
    assert main(base + ["--count", "10"]) == 0
    assert digest(d / "out" / "synthetic1") == first

    # a smaller regeneration leaves no orphaned images behind
    assert main(base + ["--count", "3"]) == 0
    assert len(list((d / "out" / "synthetic1" / "images").iterdir())) == 3

    assert main(base + ["--count", "2", "--set-tag", "synthetic2"]) == 0
    rows = read_generation_manifest(d / "out" / "synthetic2" / "manifest.csv")
    assert all(r.background_id.startswith("textured-") for r in rows)


def test_generate_empty_background_library(tmp_path, pipeline):
    _, _, manifest = pipeline
    (tmp_path / "empty").mkdir()
    cfg = write_cfg(tmp_path, f"\n[backgrounds]\nplain = {tmp_path / 'empty'}\n")
    ck = pipeline[0] / "out" / "train" / "step_3"
    assert main(["generate", "--config", cfg, "--manifest", str(manifest), "--checkpoint", str(ck)]) == 3


def test_baseline_zero_variance_is_pure_blend(tmp_path, pipeline):
    d, _, manifest = pipeline
    shutil.copytree(d / "out" / "backgrounds", tmp_path / "out" / "backgrounds")
    cfg = write_cfg(tmp_path, "")
    assert main(["baseline", "--config", cfg, "--manifest", str(manifest), "--count", "5", "--set", "pipeline.speckle_variance=0"]) == 0
    rows = read_generation_manifest(tmp_path / "out" / "baseline" / "manifest.csv")
    assert len(rows) == 5 and {r.set_tag for r in rows} == {"baseline"}
    from latentforge.blending import library_from_records
    from latentforge.cli import _background_library, load_config
    from latentforge.core import RandomSource

    pc = load_config(cfg)
    lib = _background_library(pc, "plain", RandomSource(pc.seed).fork("generate", "baseline").fork("library"))
    for r in rows:
        want = blend(load_image(r.content_path), lib[r.background_id], r.alpha)
        got = load_image(r.synthetic_path)
        assert np.max(np.abs(got.pixels - want.pixels)) <= 0.5 / 255 + 1e-12


def test_evaluate_report(tmp_path, pipeline):
    d, cfg, manifest = pipeline
    assert main(["generate", "--config", cfg, "--manifest", str(manifest), "--count", "6"]) == 0
    synth = d / "out" / "synthetic1" / "manifest.csv"
    copy = d / "copy" / "manifest.csv"
    copy.parent.mkdir(exist_ok=True)
    shutil.copytree(d / "out" / "synthetic1" / "images", d / "copy" / "images", dirs_exist_ok=True)
    copy.write_text(synth.read_text().replace("../toycorpus", "../out/toycorpus"))
    assert main(["evaluate", "--config", cfg, "--manifests", str(synth), str(copy), "--real", str(manifest), "--plot"]) == 0
    out = d / "out" / "evaluation"
    rep = read_report(out / "report.txt")
    assert rep["report"]["sets"] == "synthetic1,synthetic1_,real"
    sec = rep["set:synthetic1"]
    assert sec["n"] == "6" and sec["histogram_file"] != "none" and sec["projection_file"] != "none"
    assert float(rep["wasserstein"]["synthetic1|synthetic1_"]) == 0.0
    assert sec["wasserstein_vs_real"] != "n/a"
    assert (out / "quality.png").is_file() and (out / "projection.png").is_file()


def test_evaluate_single_set(tmp_path, pipeline):
    d, cfg, manifest = pipeline
    assert main(["generate", "--config", cfg, "--manifest", str(manifest), "--count", "6"]) == 0
    ck = d / "out" / "train" / "step_3"
    cfg2 = write_cfg(tmp_path)
    synth = d / "out" / "synthetic1" / "manifest.csv"
    assert main(["evaluate", "--config", cfg2, "--manifests", str(synth), "--checkpoint", str(ck)]) == 0
    rep = read_report(tmp_path / "out" / "evaluation" / "report.txt")
    sec = rep["set:synthetic1"]
    # matching summary, quality histogram and projection all present
    assert sec["mean"] != "n/a" and sec["histogram_file"] != "none" and sec["projection_file"] != "none"


def test_evaluate_tool_failure_is_not_fatal(tmp_path, pipeline):
    d, _, manifest = pipeline
    tool = tmp_path / "nfiq"
    tool.write_text("#!/bin/sh\nexit 1\n")
    tool.chmod(0o755)
    cfg = write_cfg(tmp_path, f"\n[tools]\nquality_exe = {tool}\n")
    ck = d / "out" / "train" / "step_3"
    assert main(["evaluate", "--config", cfg, "--real", str(manifest), "--checkpoint", str(ck)]) == 0
    sec = read_report(tmp_path / "out" / "evaluation" / "report.txt")["set:real"]
    assert sec["quality_n"] == "0" and int(sec["quality_failures"]) == 8
    cfg = write_cfg(tmp_path, "\n[tools]\nquality_exe = /nonexistent/nfiq\n")
    assert main(["evaluate", "--config", cfg, "--real", str(manifest), "--checkpoint", str(ck)]) == 4


def test_config_precedence(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path)
    assert load_config(cfg, env={}).seed == 5
    assert load_config(cfg, env={SEED_ENV: "9"}).seed == 9
    assert load_config(cfg, ["pipeline.seed=11"], env={SEED_ENV: "9"}).seed == 11
    pc = load_config(cfg, env={})
    assert pc.output_dir == tmp_path / "out"
    assert pc.train.resolution == 32 and pc.train.seed == 5 and pc.train.steps == 3
    assert (pc.alpha_min, pc.alpha_max) == (0.3, 0.8)
    with pytest.raises(ConfigError):
        load_config(cfg, ["pipeline.colour=blue"], env={})
    with pytest.raises(ConfigError):
        load_config(cfg, ["pipeline.alpha_min=0.9"], env={})
    with pytest.raises(ConfigError):
        load_config(cfg, ["train.steps=many"], env={})
    with pytest.raises(UsageError):
        load_config(cfg, ["steps"], env={})


def test_print_config_round_trips(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(SEED_ENV, "42")
    cfg = write_cfg(tmp_path)
    assert main(["train", "--config", cfg, "--manifest", "x", "--steps", "7", "--print-config"]) == 0
    text = capsys.readouterr().out
    cp = configparser.ConfigParser()
    cp.read_string(text)
    assert cp["pipeline"]["seed"] == "42" and cp["train"]["steps"] == "7"
    (tmp_path / "dumped.ini").write_text(text)
    monkeypatch.delenv(SEED_ENV)
    again = load_config(str(tmp_path / "dumped.ini"), env={})
    assert again.to_ini() == load_config(cfg, ["pipeline.seed=42", "train.steps=7"], env={}).to_ini()


def test_locked_output_dir(tmp_path):
    cfg = write_cfg(tmp_path)
    (tmp_path / "out").mkdir()
    with filelock.FileLock(str(tmp_path / "out" / LOCK_NAME)):
        assert main(["toycorpus", "--config", cfg, "--n-fingers", "2", "--per-finger", "2"]) == 2


def test_bad_subcommand_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["frobnicate"])
    assert err.value.code == 2
