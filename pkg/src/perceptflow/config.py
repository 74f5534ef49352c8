"""Run configuration: embedded defaults, YAML files, environment overrides, profiles."""
from __future__ import annotations

import copy
import os
from dataclasses import fields

import yaml

from .backbone import BackboneConfig
from .codec import CodecConfig, CodecTrainConfig, latent_shape
from .datagen.scene import ConfigError, GenConfig
from .perception import TASKS
from .trainer import TrainConfig, TrainConfigError

ENV_PREFIX = "PERCEPTFLOW_"
PROFILES = ("desk", "paper-shape")

# full-scale geometry, used for shape-only dry runs
PAPER_SHAPE = {"frames": 81, "height": 480, "width": 832, "f_t": 4, "f_s": 8}

DEFAULTS = {
    "profile": "desk",
    "seed": 0,
    "datagen": {"clips": 64, "frames": 17, "height": 64, "width": 64, "joints": 16, "fps": 24.0},
    "codec": {"latent_channels": 16, "f_t": 4, "f_s": 8, "stem": 16, "widths": [32, 48, 64], "res_blocks": 0,
              "steps": 6000, "batch_size": 4, "lr": 2e-3, "crop_frames": 9, "crop_size": 32,
              "clip_norm": 1.0, "rmse_threshold": 0.05},
    "backbone": {"width": 128, "depth": 3, "heads": 4, "mlp_ratio": 4, "kp_hidden": 256,
                 "mask_query_tokens": True},
    "pretrain": {"steps": 1000, "batch_size": 8, "base_lr": 1e-3},
    "latent": {"steps": 2000, "batch_size": 8, "base_lr": 1e-3,
               "task_weights": {t: 1.0 for t in TASKS}, "input_timestep": 0.0},
    "ambient": {"steps": 1000, "batch_size": 2, "base_lr": 1e-4, "train_decoder": True,
                "task_weights": {t: 1.0 for t in TASKS}, "input_timestep": 0.0},
    "optim": {"warmup_frac": 0.1, "clip_norm": 1.0, "drop_norm": 10.0, "log_every": 100},
    "eval": {"tasks": list(TASKS)},
}


def merge(base, override, path=""):
    """Deep-merge ``override`` into a copy of ``base``; unknown keys are an error."""
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        key = f"{path}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and k != "task_weights":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = v
    return out


def env_overrides(environ=None):
    """``PERCEPTFLOW_LATENT__STEPS=50`` -> ``{"latent": {"steps": 50}}`` (values parsed as YAML)."""
    environ = os.environ if environ is None else environ
    tree = {}
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        keys = name[len(ENV_PREFIX):].lower().split("__")
        node = tree
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return tree


def load_config(path=None, overrides=None, environ=None):
    """Defaults <- file <- environment <- explicit overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            with open(path) as f:
                cfg = merge(cfg, yaml.safe_load(f) or {})
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = merge(cfg, env_overrides(environ))
    cfg = merge(cfg, overrides or {})
    validate(cfg)
    return cfg


def dump_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)


def _pick(d, cls):
    names = {f.name for f in fields(cls)}
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in names}


def gen_config(cfg):
    d = cfg["datagen"]
    return GenConfig.from_dict({k: v for k, v in d.items() if k != "clips"}).validate()


def codec_config(cfg):
    return CodecConfig(**_pick(cfg["codec"], CodecConfig))


def codec_train_config(cfg):
    return CodecTrainConfig(codec=codec_config(cfg), seed=cfg["seed"], log_every=cfg["optim"]["log_every"],
                            **_pick({k: v for k, v in cfg["codec"].items() if k != "codec"}, CodecTrainConfig))


def backbone_config(cfg):
    return BackboneConfig(seed=cfg["seed"], **_pick(cfg["backbone"], BackboneConfig))


def train_config(cfg, stage):
    section = {"pretrain": "pretrain", "latent": "latent", "ambient": "ambient"}[stage]
    d = {**cfg["optim"], **cfg[section]}
    return TrainConfig(stage=stage, seed=cfg["seed"], **_pick(d, TrainConfig))


def validate(cfg):
    if cfg["profile"] not in PROFILES:
        raise ConfigError(f"profile must be one of {PROFILES}, got {cfg['profile']!r}")
    try:
        c = codec_train_config(cfg).codec
        if cfg["profile"] == "desk":
            g = gen_config(cfg)
            latent_shape(g.frames, g.height, g.width, c.f_t, c.f_s)
        backbone_config(cfg)
        for stage in ("pretrain", "latent", "ambient"):
            train_config(cfg, stage)
    except (TrainConfigError, TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    for t in cfg["eval"]["tasks"]:
        if t not in TASKS:
            raise ConfigError(f"unknown eval task {t!r}; valid tasks: {', '.join(TASKS)}")
    return cfg


def apply_profile(cfg):
    """The paper-shape profile swaps in paper geometry; it is only usable for dry runs."""
    if cfg["profile"] != "paper-shape":
        return cfg
    out = copy.deepcopy(cfg)
    out["datagen"].update(frames=PAPER_SHAPE["frames"], height=PAPER_SHAPE["height"], width=PAPER_SHAPE["width"])
    out["codec"].update(f_t=PAPER_SHAPE["f_t"], f_s=PAPER_SHAPE["f_s"])
    return out
