"""Stage orchestration shared by the command line and the demos."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .codec import dry_run_shapes, latent_shape, load_codec, save_codec, train_codec
from .datagen.io import ClipDataset, generate_dataset, load_manifest, read_clip
from .metrics import evaluate_dataset, write_report
from .perception import DENSE_TASKS, KEYPOINT_TASKS, check_task, encode_modality, predict
from .trainer import Checkpoint, pretrain_generative, train_stage1, train_stage2

log = logging.getLogger(__name__)


def _skip(path, force, what):
    if Path(path).exists() and not force:
        log.info("%s exists at %s; skipping (use --force to rebuild)", what, path)
        return True
    return False


def make_dataset(cfg, out, clips=None, seed=None, force=False):
    clips = cfg["datagen"]["clips"] if clips is None else clips
    seed = cfg["seed"] if seed is None else seed
    seeds = list(range(seed, seed + clips))
    manifest = Path(out) / "manifest.json"
    if not force and manifest.exists() and load_manifest(out)["seeds"] == seeds:
        log.info("dataset at %s already holds seeds %s", out, seeds)
        return manifest
    return generate_dataset(out, seeds, config_mod.gen_config(cfg), force=force)


def codec_training_videos(dataset):
    """RGB clips plus every dense modality in its 3-channel form."""
    vids = []
    for clip in dataset:
        vids.append(clip.rgb)
        vids.extend(encode_modality(clip.gt, t).values for t in DENSE_TASKS)
    return np.stack(vids).astype(np.float32)


def fit_codec(cfg, data, out, force=False):
    if _skip(out, force, "codec"):
        return load_codec(out)
    torch.manual_seed(cfg["seed"])
    codec = train_codec(codec_training_videos(ClipDataset(data)), config_mod.codec_train_config(cfg))
    log.info("codec reconstruction RMSE %.4f", codec.heldout_rmse)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out)
    return codec


def run_pretrain(cfg, data, codec_path, out, force=False, log_path=None):
    if _skip(out, force, "pretrain checkpoint"):
        return Checkpoint.load(out)
    ck = pretrain_generative(ClipDataset(data), load_codec(codec_path), config_mod.train_config(cfg, "pretrain"),
                             backbone_config=config_mod.backbone_config(cfg), log_path=log_path)
    ck.save(out)
    return ck


def run_stage(cfg, stage, data, ckpt_in, out, force=False, log_path=None):
    if _skip(out, force, f"{stage} checkpoint"):
        return Checkpoint.load(out)
    fn = {"latent": train_stage1, "ambient": train_stage2}[stage]
    ck = fn(ClipDataset(data), Checkpoint.load(ckpt_in), config_mod.train_config(cfg, stage), log_path=log_path)
    ck.save(out)
    return ck


def run_eval(cfg, data, out, ckpt=None, oracle=False, tasks=None):
    tasks = cfg["eval"]["tasks"] if tasks is None else tasks
    models = None
    if not oracle:
        ck = Checkpoint.load(ckpt)
        models = (ck.codec, ck.backbone.eval())
    report = evaluate_dataset(models, ClipDataset(data), tasks, oracle=oracle)
    write_report(report, out)
    return report


def load_video(path):
    """A clip directory (``rgb.npy`` inside) or a bare ``T x H x W x 3`` .npy file."""
    p = Path(path)
    if p.is_dir():
        manifest = load_manifest(p.parent) if (p.parent / "manifest.json").exists() else None
        clip = read_clip(p, manifest)
        return clip.rgb, clip.gt
    return np.load(p).astype(np.float32), None


def run_infer(task, video_path, ckpt, out):
    from .viz import save_keypoints_csv, save_modality_video, save_panels

    check_task(task)
    ck = Checkpoint.load(ckpt)
    rgb, gt = load_video(video_path)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    pred = predict(rgb, task, ck.codec, ck.backbone.eval())
    if task in KEYPOINT_TASKS:
        vis = None if gt is None or task == "kp3d" else gt.visibility
        save_keypoints_csv(out / f"{task}.csv", pred.coords, vis)
        np.save(out / f"{task}.npy", pred.coords.astype(np.float32))
    else:
        save_modality_video(out / task, pred)
        np.save(out / f"{task}.npy", pred.values)
    save_panels(out / "panels", rgb, pred, task, gt)
    return pred


def dry_run(cfg):
    """Shape plumbing for the configured geometry without allocating buffers."""
    cfg = config_mod.apply_profile(cfg)
    d, c = cfg["datagen"], cfg["codec"]
    T, H, W = d["frames"], d["height"], d["width"]
    latent, video = dry_run_shapes(T, H, W, config_mod.codec_config(cfg))
    grid = latent_shape(T, H, W, c["f_t"], c["f_s"])
    return {"profile": cfg["profile"], "video": [T, H, W, 3], "latent": list(latent), "decoded": list(video),
            "latent_grid": list(grid), "query_tokens": T}


def run_pipeline(cfg, out, force=False):
    """Datagen -> codec -> pretrain -> latent -> ambient -> eval, all under ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    make_dataset(cfg, data, force=force)
    fit_codec(cfg, data, out / "codec.pt", force=force)
    run_pretrain(cfg, data, out / "codec.pt", out / "pretrain.ckpt", force=force, log_path=out / "metrics.jsonl")
    run_stage(cfg, "latent", data, out / "pretrain.ckpt", out / "latent.ckpt", force=force,
              log_path=out / "metrics.jsonl")
    run_stage(cfg, "ambient", data, out / "latent.ckpt", out / "ambient.ckpt", force=force,
              log_path=out / "metrics.jsonl")
    report = run_eval(cfg, data, out / "eval", ckpt=out / "ambient.ckpt")
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    return report
