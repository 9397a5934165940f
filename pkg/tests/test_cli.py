import filecmp
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from pslab.checkpoint import StubScorer, save_checkpoint
from pslab.cli import main, parse_scale_set, upsample_nearest
from pslab.config import RunConfigError, load_run_config, parse_run_config
from pslab.imageio import read_pnm
from pslab.networks import DepthNet, DepthNetConfig, MaskNet, MaskNetConfig

TINY = {
    "synth": {"seed": 1, "image_side": 32, "counts": {"train": 32, "dev": 16, "test": 16}},
    "model": {"kind": "mask", "feature_channels": 8, "stage_channels": [4, 8], "scales": [4, 2, 1]},
    "optim": {"epochs": 2, "batch_size": 8},
}


@pytest.fixture
def tiny(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps({**TINY, "output_dir": str(tmp_path / "default_out")}))
    return str(path)


def write_config(tmp_path, doc, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


# -- RunConfig ------------------------------------------------------------------

def test_config_defaults():
    cfg = parse_run_config({})
    assert cfg.model_kind == "mask" and cfg.model.scales == (8, 4, 2, 1)
    assert cfg.synth.counts == {"train": 2000, "dev": 400, "test": 500}
    assert cfg.optim.kind == "adam" and cfg.optim.batch_size == 16
    assert parse_run_config({"model": {"kind": "depth"}}).model.scales == (32, 16)


@pytest.mark.parametrize("doc,key", [
    ({"extra": 1}, "config.extra"),
    ({"synth": {"colour": 1}}, "synth.colour"),
    ({"synth": {"attack_types": ["hologram"]}}, "synth.attack_types"),
    ({"model": {"depth": 3}}, "model.depth"),
    ({"model": {"kind": "vit"}}, "model.kind"),
    ({"optim": {"lr": -1}}, "optim"),
    ({"optim": {"preset": "turbo"}}, "optim.preset"),
    ({"protocol": {"kind": "cross_type_loo"}}, "protocol.held_out"),
    ({"protocol": {"kind": "cross_type_loo", "held_out": "hologram"}}, "protocol.held_out"),
    ({"metrics": {"colour": 1}}, "metrics.colour"),
])
def test_config_rejects_with_key(doc, key):
    with pytest.raises(RunConfigError, match=key.replace(".", r"\.")):
        parse_run_config(doc)


def test_resolved_config_reparses_equal(tmp_path):
    cfg = parse_run_config({**TINY, "protocol": {"kind": "cross_domain", "held_out": "dim"}})
    path = cfg.write_resolved(tmp_path)
    again = load_run_config(path)
    assert again == cfg
    assert again.to_json() == cfg.to_json()


def test_with_seed_keeps_data_seed():
    cfg = parse_run_config(TINY).with_seed(9)
    assert cfg.optim.seed == 9 and cfg.synth.seed == 1


def test_parse_scale_set():
    assert parse_scale_set("8,4,2,1", "mask") == ("mask", (8, 4, 2, 1))
    assert parse_scale_set("depth:32,16", "mask") == ("depth", (32, 16))
    with pytest.raises(RunConfigError):
        parse_scale_set("vit:8", "mask")
    with pytest.raises(RunConfigError):
        parse_scale_set("8,x", "mask")


def test_upsample_nearest():
    m = np.arange(4.0).reshape(2, 2)
    up = upsample_nearest(m, 4)
    assert up.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


# -- synth ----------------------------------------------------------------------

def test_synth_counts_and_determinism(tmp_path, tiny):
    assert main(["synth", "--config", tiny, "--out", str(tmp_path / "a"), "--quiet"]) == 0
    assert main(["synth", "--config", tiny, "--out", str(tmp_path / "b"), "--quiet"]) == 0
    rows = (tmp_path / "a" / "index.csv").read_text().splitlines()
    assert len(rows) - 1 == 32 + 16 + 16
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only
    for split in ("train", "dev", "test"):
        sub = filecmp.dircmp(tmp_path / "a" / split, tmp_path / "b" / split)
        _, mismatch, errors = filecmp.cmpfiles(tmp_path / "a" / split, tmp_path / "b" / split,
                                               sub.common_files, shallow=False)
        assert not mismatch and not errors


def test_synth_invalid_attack_type(tmp_path, capsys):
    path = write_config(tmp_path, {"synth": {"attack_types": ["print", "hologram"]}})
    assert main(["synth", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "attack_types" in capsys.readouterr().err


def test_bad_json_and_missing_file(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1


# -- train / eval -----------------------------------------------------------------

def test_train_then_eval_is_idempotent(tmp_path, tiny):
    for run in ("r1", "r2"):
        assert main(["train", "--config", tiny, "--out", str(tmp_path / run), "--quiet"]) == 0
        assert main(["eval", "--config", tiny, "--checkpoint", str(tmp_path / run / "checkpoint"),
                     "--out", str(tmp_path / run / "eval"), "--quiet"]) == 0
    for name in ("train_log.jsonl", "resolved_config.json", "eval/report.json", "eval/scores.csv",
                 "checkpoint/manifest.json", "checkpoint/classifier.weight.pslt"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes(), name
    lines = (tmp_path / "r1" / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    report = json.loads((tmp_path / "r1" / "eval" / "report.json").read_text())
    assert report["acer"] == pytest.approx((report["apcer"] + report["bpcer"]) / 2)


def test_seed_flag_overrides(tmp_path, tiny):
    assert main(["train", "--config", tiny, "--seed", "5", "--scales", "2,1",
                 "--out", str(tmp_path / "o"), "--quiet"]) == 0
    resolved = json.loads((tmp_path / "o" / "resolved_config.json").read_text())
    assert resolved["optim"]["seed"] == 5
    assert resolved["model"]["scales"] == [2, 1]
    manifest = json.loads((tmp_path / "o" / "checkpoint" / "manifest.json").read_text())
    assert manifest["seed"] == 5


def test_default_output_dir(tmp_path, tiny):
    assert main(["train", "--config", tiny, "--quiet"]) == 0
    assert (tmp_path / "default_out" / "checkpoint" / "manifest.json").is_file()


def test_eval_perfect_stub(tmp_path, tiny):
    save_checkpoint(StubScorer("perfect"), tmp_path / "stub")
    assert main(["eval", "--config", tiny, "--checkpoint", str(tmp_path / "stub"),
                 "--out", str(tmp_path / "e"), "--quiet"]) == 0
    assert json.loads((tmp_path / "e" / "report.json").read_text())["acer"] == 0.0


def test_eval_mismatched_checkpoint(tmp_path, tiny):
    save_checkpoint(MaskNet(MaskNetConfig(), 0), tmp_path / "big")  # expects 64x64
    assert main(["eval", "--config", tiny, "--checkpoint", str(tmp_path / "big"),
                 "--out", str(tmp_path / "e")]) == 3


def test_eval_corrupt_checkpoint(tmp_path, tiny):
    save_checkpoint(MaskNet(MaskNetConfig(input_side=32, feature_channels=8, scales=(4, 2, 1),
                                       stage_channels=(4, 8)), 0),
                    tmp_path / "ck")
    (tmp_path / "ck" / "classifier.weight.pslt").write_bytes(b"garbage")
    assert main(["eval", "--config", tiny, "--checkpoint", str(tmp_path / "ck"),
                 "--out", str(tmp_path / "e")]) == 3


def test_eval_requires_checkpoint(tmp_path, tiny):
    assert main(["eval", "--config", tiny, "--out", str(tmp_path / "e")]) == 2


def test_eval_dump_depth(tmp_path, tiny):
    cfg = DepthNetConfig(input_side=32, scales=(16, 8), channels=(4, 4, 4), head_channels=4)
    save_checkpoint(DepthNet(cfg, 0), tmp_path / "d")
    assert main(["eval", "--config", tiny, "--checkpoint", str(tmp_path / "d"), "--out", str(tmp_path / "e"),
                 "--dump-depth", str(tmp_path / "maps"), "--quiet"]) == 0
    maps = sorted(os.listdir(tmp_path / "maps"))
    assert len(maps) == 16
    assert read_pnm(tmp_path / "maps" / maps[0]).shape == (16, 16)


def test_train_rejects_multi_fold(tmp_path):
    path = write_config(tmp_path, {**TINY, "protocol": {"kind": "cross_type_loo", "held_out": ["print", "replay"]}})
    assert main(["train", "--config", path, "--out", str(tmp_path / "o")]) == 2


# -- ablate -----------------------------------------------------------------------

def test_ablate_two_rows(tmp_path, tiny):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", tiny, "--scales", "4", "--scales", "4,2,1", "--seeds", "0,1",
                 "--out", str(out), "--quiet"]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["scales"] for r in rows] == [[4], [4, 2, 1]]
    assert rows[0]["seeds"] == rows[1]["seeds"] == [0, 1]
    csv_lines = (out / "ablation.csv").read_text().splitlines()
    assert csv_lines[0].startswith("model,label_kind,scales")
    assert len(csv_lines) == 3


def test_ablate_single_seed_std_zero_and_label_kinds(tmp_path, tiny):
    out = tmp_path / "ab"
    assert main(["ablate", "--config", tiny, "--scales", "4,2,1", "--scales", "depth:16,8", "--seed", "3",
                 "--out", str(out), "--quiet"]) == 0
    rows = json.loads((out / "ablation.json").read_text())
    assert [r["label_kind"] for r in rows] == ["binary_mask", "depth"]
    assert all(r["acer_std"] == 0.0 and r["seeds"] == [3] for r in rows)


def test_ablate_needs_two_sets(tmp_path, tiny):
    assert main(["ablate", "--config", tiny, "--scales", "4", "--out", str(tmp_path / "o")]) == 2


def test_ablate_parallel_matches_serial(tmp_path, tiny, monkeypatch):
    args = ["ablate", "--config", tiny, "--scales", "4", "--scales", "2,1", "--seeds", "0", "--quiet"]
    assert main(args + ["--out", str(tmp_path / "s")]) == 0
    monkeypatch.setenv("PSLAB_THREADS", "2")
    assert main(args + ["--jobs", "4", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "s" / "ablation.json").read_bytes() == (tmp_path / "p" / "ablation.json").read_bytes()


# -- visualize --------------------------------------------------------------------

def test_visualize_constant_stub_is_mid_grey(tmp_path, tiny):
    save_checkpoint(StubScorer("constant", 0.5), tmp_path / "stub")
    out = tmp_path / "v"
    assert main(["visualize", "--config", tiny, "--checkpoint", str(tmp_path / "stub"),
                 "--out", str(out), "--count", "2", "--quiet"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["samples"]) == 2
    for s in manifest["samples"]:
        for name in s["maps"].values():
            img = read_pnm(out / name)
            assert img.shape == (32, 32) and (img == 128).all()


def test_visualize_partial_attack_cells(tmp_path):
    doc = {"synth": {"seed": 1, "image_side": 64, "counts": {"train": 0, "dev": 0, "test": 4}}}
    cfg = write_config(tmp_path, doc)
    save_checkpoint(StubScorer("perfect"), tmp_path / "stub")
    out = tmp_path / "v"
    assert main(["visualize", "--config", cfg, "--checkpoint", str(tmp_path / "stub"),
                 "--samples", "studio/partial_print/0", "--out", str(out), "--quiet"]) == 0
    entry = json.loads((out / "manifest.json").read_text())["samples"][0]
    img = read_pnm(out / entry["maps"]["8"])
    assert img.shape == (64, 64)
    cells = img.reshape(8, 8, 8, 8).transpose(0, 2, 1, 3).reshape(64, 64)
    assert (cells == cells[:, :1]).all()  # every one of the 64 cells is uniform
    assert set(np.unique(img)) == {0, 255}
    assert entry["score"] == 0.0


def test_visualize_trained_mask_model(tmp_path, tiny):
    assert main(["train", "--config", tiny, "--out", str(tmp_path / "t"), "--quiet"]) == 0
    out = tmp_path / "v"
    assert main(["visualize", "--config", tiny, "--checkpoint", str(tmp_path / "t" / "checkpoint"),
                 "--out", str(out), "--count", "3", "--quiet"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["scales"] == [4, 2, 1]
    for s in manifest["samples"]:
        assert 0 < s["score"] < 1
        assert read_pnm(out / s["input"]).shape == (32, 32, 3)


def test_visualize_depth_checkpoint_is_mode_error(tmp_path, tiny, capsys):
    cfg = DepthNetConfig(input_side=32, scales=(16, 8), channels=(4, 4, 4), head_channels=4)
    save_checkpoint(DepthNet(cfg, 0), tmp_path / "d")
    assert main(["visualize", "--config", tiny, "--checkpoint", str(tmp_path / "d"),
                 "--out", str(tmp_path / "v")]) == 4
    assert "--dump-depth" in capsys.readouterr().err


def test_console_script_runs(tmp_path):
    r = subprocess.run([sys.executable, "-m", "pslab.cli", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "pslab" in r.stdout
    r = subprocess.run([sys.executable, "-m", "pslab.cli", "frobnicate"], capture_output=True, text=True)
    assert r.returncode == 2
