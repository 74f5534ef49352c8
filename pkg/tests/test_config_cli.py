import csv
import json

import numpy as np
import pytest
import yaml
from PIL import Image

from perceptflow import config as config_mod
from perceptflow.cli import main
from perceptflow.datagen.scene import ConfigError
from perceptflow.perception import KeypointSet, ModalityVideo
from perceptflow.viz import save_keypoints_csv, save_modality_video, save_panels, to_uint8


# -- config ---------------------------------------------------------------------------

def test_defaults_validate_and_roundtrip_through_yaml():
    cfg = config_mod.load_config(environ={})
    assert cfg == config_mod.DEFAULTS
    assert yaml.safe_load(config_mod.dump_config(cfg)) == cfg


def test_file_env_and_override_precedence(tmp_path):
    f = tmp_path / "c.yaml"
    f.write_text("latent:\n  steps: 10\n  batch_size: 3\n")
    env = {"PERCEPTFLOW_LATENT__STEPS": "20", "PERCEPTFLOW_SEED": "7", "OTHER": "x"}
    cfg = config_mod.load_config(f, {"latent": {"steps": 30}}, environ=env)
    assert cfg["latent"]["steps"] == 30 and cfg["latent"]["batch_size"] == 3 and cfg["seed"] == 7
    assert config_mod.load_config(f, environ=env)["latent"]["steps"] == 20


def test_task_weights_replace_wholesale():
    cfg = config_mod.load_config(overrides={"latent": {"task_weights": {"depth": 1.0}}}, environ={})
    assert cfg["latent"]["task_weights"] == {"depth": 1.0}
    assert config_mod.train_config(cfg, "latent").task_weights == {"depth": 1.0}


@pytest.mark.parametrize("override", [{"nope": 1}, {"latent": {"stepz": 1}}, {"latent": {"steps": 0}},
                                      {"profile": "huge"}, {"eval": {"tasks": ["albedo"]}},
                                      {"optim": {"clip_norm": 20.0}}, {"codec": {"latent_channels": 2}},
                                      {"datagen": {"frames": 18}}])
def test_invalid_configs_raise(override):
    with pytest.raises(ConfigError):
        config_mod.load_config(overrides=override, environ={})


def test_stage_configs_carry_schedule_knobs():
    cfg = config_mod.load_config(environ={})
    tc = config_mod.train_config(cfg, "ambient")
    assert tc.stage == "ambient" and tc.warmup_frac == 0.1 and tc.clip_norm == 1.0 and tc.drop_norm == 10.0
    assert config_mod.backbone_config(cfg).mask_query_tokens is True


def test_paper_shape_profile_geometry():
    cfg = config_mod.apply_profile(config_mod.load_config(overrides={"profile": "paper-shape"}, environ={}))
    assert (cfg["datagen"]["frames"], cfg["datagen"]["height"], cfg["datagen"]["width"]) == (81, 480, 832)
    assert (cfg["codec"]["f_t"], cfg["codec"]["f_s"]) == (4, 8)


# -- viz ------------------------------------------------------------------------------

def test_modality_video_pngs_are_lossless_8bit(tmp_path):
    v = np.random.default_rng(0).uniform(size=(2, 8, 8, 3)).astype(np.float32)
    paths = save_modality_video(tmp_path, ModalityVideo(v, "normal"))
    assert len(paths) == 2
    img = np.asarray(Image.open(paths[1]))
    assert img.dtype == np.uint8 and np.array_equal(img, to_uint8(v[1]))


def test_keypoint_table(tmp_path):
    coords = np.arange(2 * 3 * 2, dtype=float).reshape(2, 3, 2) / 10
    vis = np.array([[1, 0, 1], [1, 1, 0]])
    rows = list(csv.reader(open(save_keypoints_csv(tmp_path / "k.csv", coords, vis))))
    assert rows[0] == ["frame", "joint", "x", "y", "visible"]
    assert len(rows) == 7 and rows[2][:2] == ["0", "1"] and rows[2][-1] == "0"
    assert float(rows[6][3]) == pytest.approx(coords[1, 2, 1])


def test_panels_have_three_tiles_with_gt(small_dataset, tmp_path):
    clip = small_dataset[0]
    T, H, W = clip.rgb.shape[:3]
    pred = ModalityVideo(clip.rgb, "normal")
    p = save_panels(tmp_path / "a", clip.rgb, pred, "normal", clip.gt)
    assert len(p) == T and Image.open(p[0]).width == 3 * 4 * W
    q = save_panels(tmp_path / "b", clip.rgb, pred, "normal")
    assert Image.open(q[0]).width == 2 * 4 * W
    k = save_panels(tmp_path / "c", clip.rgb, KeypointSet(clip.gt.kp2d, "image"), "kp2d", clip.gt)
    assert Image.open(k[0]).width == 2 * 4 * W


# -- cli ------------------------------------------------------------------------------

def test_print_config(capsys):
    assert main(["--print-config"]) == 0
    assert yaml.safe_load(capsys.readouterr().out) == config_mod.load_config()


def test_exit_codes(tmp_path, monkeypatch):
    assert main(["infer", "--task", "albedo", "--in", "x", "--ckpt", "y", "--out", str(tmp_path)]) == 2
    assert main(["eval", "--data", str(tmp_path), "--out", str(tmp_path / "e")]) == 2
    assert main(["train", "--stage", "latent", "--data", str(tmp_path), "--ckpt", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o")]) == 1
    monkeypatch.setenv("PERCEPTFLOW_LATENT__STEPS", "-3")
    assert main(["dry-run"]) == 2


def test_paper_shape_is_dry_run_only(tmp_path, capsys):
    assert main(["dry-run", "--profile", "paper-shape"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["latent_grid"] == [21, 60, 104] and out["query_tokens"] == 81
    cfg = tmp_path / "p.yaml"
    cfg.write_text("profile: paper-shape\n")
    assert main(["--config", str(cfg), "datagen", "--out", str(tmp_path / "d")]) == 2


def test_desk_dry_run(capsys):
    assert main(["dry-run"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["latent_grid"] == [5, 8, 8] and out["query_tokens"] == 17


def test_datagen_twice_gives_identical_manifest_and_eval_oracle(tmp_path, capsys):
    d = tmp_path / "d"
    assert main(["datagen", "--clips", "2", "--seed", "0", "--out", str(d)]) == 0
    first = (d / "manifest.json").read_bytes()
    assert main(["--force", "datagen", "--clips", "2", "--seed", "0", "--out", str(d)]) == 0
    assert (d / "manifest.json").read_bytes() == first
    assert main(["eval", "--oracle", "--data", str(d), "--out", str(tmp_path / "e")]) == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())
    assert report["oracle"] and report["tasks"]["normal"]["figure_mean"] == 0


def test_selftest_subset(capsys):
    assert main(["selftest", "--only", "losses", "rope", "shapes"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3
    assert main(["selftest", "--only", "bogus"]) == 2
