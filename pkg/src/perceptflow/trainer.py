"""Generative pretraining and the two-stage perception fine-tune."""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import GENERATE, Backbone, BackboneConfig, backbone_from_state, backbone_state
from .codec import TrainingDiverged, codec_checksum, codec_from_state, codec_state
from .losses import keypoint_loss, l2_loss, normal_loss, rectified_flow_loss, ssi_depth_loss
from .perception import DENSE_TASKS, KEYPOINT_TASKS, TASKS, KeypointSet, encode_modality

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
STAGES = ("pretrain", "latent", "ambient")


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 5e-5
    warmup_frac: float = 0.10
    clip_norm: float = 1.0
    drop_norm: float = 10.0
    batch_size: int = 8
    steps: int = 2000
    stage: str = "latent"
    task_weights: dict = field(default_factory=lambda: {t: 1.0 for t in TASKS})
    seed: int = 0
    train_decoder: bool = True          # ambient stage: decoder in the loop
    input_timestep: float = 0.0         # 0 is the clean end of the flow
    mask_query_tokens: bool | None = None   # None keeps the backbone's setting
    log_every: int = 100

    def __post_init__(self):
        if not 0 < self.warmup_frac < 1:
            raise TrainConfigError("warmup_frac must lie in (0, 1)")
        if not self.drop_norm > self.clip_norm > 0:
            raise TrainConfigError("need drop_norm > clip_norm > 0")
        if self.stage not in STAGES:
            raise TrainConfigError(f"stage must be one of {STAGES}")
        if self.steps < 1 or self.batch_size < 1:
            raise TrainConfigError("steps and batch_size must be positive")
        if not 0 <= self.input_timestep <= 1:
            raise TrainConfigError("input_timestep must lie in [0, 1]")
        _check_weights(self.task_weights)

    def digest(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


# -- schedule and gradient control ------------------------------------------------------

def warmup_steps(total_steps, cfg):
    return math.ceil(cfg.warmup_frac * total_steps)


def lr_schedule(step, total_steps, cfg):
    """Linear ramp from 0 to ``base_lr`` over the warmup, constant afterwards."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if step >= w:
        return cfg.base_lr
    return cfg.base_lr * step / w


@dataclass(frozen=True)
class GradDecision:
    factor: float
    skip: bool


def grad_control(grad_norm, cfg):
    """Clip factor for ``grad_norm``, or a skip signal above the drop threshold."""
    if not math.isfinite(grad_norm) or grad_norm > cfg.drop_norm:
        return GradDecision(0.0, True)
    if grad_norm <= cfg.clip_norm:
        return GradDecision(1.0, False)
    return GradDecision(cfg.clip_norm / grad_norm, False)


def _check_weights(weights):
    w = np.array([float(weights.get(t, 0.0)) for t in TASKS])
    unknown = set(weights) - set(TASKS)
    if unknown:
        raise TrainConfigError(f"unknown tasks in task_weights: {sorted(unknown)}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise TrainConfigError("task weights must be finite and nonnegative")
    if w.sum() <= 0:
        raise TrainConfigError("task weights are all zero")
    return w


def sample_task(rng, task_weights):
    """Categorical draw over the registered tasks."""
    w = _check_weights(task_weights)
    return TASKS[int(rng.choice(len(TASKS), p=w / w.sum()))]


def sample_timesteps(rng, n):
    """Flow times drawn uniformly from [0, 1)."""
    return rng.random(n).astype(np.float32)


# -- checkpoints -------------------------------------------------------------------------

@dataclass
class Checkpoint:
    backbone: Backbone
    codec: torch.nn.Module
    stage: str
    step: int
    config_hash: str
    optimizer: dict | None = None
    rng_state: dict | None = None
    history: list = field(default_factory=list)

    def state(self):
        return {"format_version": CHECKPOINT_FORMAT_VERSION, "stage": self.stage, "step": self.step,
                "config_hash": self.config_hash, "backbone": backbone_state(self.backbone, codec_checksum(self.codec)),
                "codec": codec_state(self.codec), "optimizer": self.optimizer,
                "rng_state": json.dumps(self.rng_state), "history": json.dumps(self.history)}

    def save(self, path):
        buf = io.BytesIO()
        torch.save(self.state(), buf)
        Path(path).write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path):
        state = torch.load(path, weights_only=True)
        if state.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {state.get('format_version')}")
        codec = codec_from_state(state["codec"])
        if state["backbone"]["codec_checksum"] != codec_checksum(codec):
            raise ValueError("backbone was trained against a different codec")
        return cls(backbone_from_state(state["backbone"]), codec, state["stage"], state["step"],
                   state["config_hash"], state["optimizer"], json.loads(state["rng_state"]),
                   json.loads(state["history"]))


class MetricsLog:
    """Append-only JSON-lines log: step, task, loss, grad_norm, lr, skipped."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None

    def write(self, record):
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")


# -- data ----------------------------------------------------------------------------------

class PreparedData:
    """Latents and targets for every clip, computed once with the frozen encoder."""

    def __init__(self, dataset, codec, tasks=TASKS, with_ambient=False):
        self.n = len(dataset)
        rgb = np.stack([c.rgb for c in dataset]).astype(np.float32)
        with torch.no_grad():
            self.rgb_latents = self._encode(codec, rgb)
        self.latent_targets, self.ambient = {}, {}
        for task in DENSE_TASKS:
            if task not in tasks:
                continue
            vids = [encode_modality(c.gt, task).values for c in dataset]
            with torch.no_grad():
                self.latent_targets[task] = self._encode(codec, np.stack(vids))
            if with_ambient:
                self.ambient[task] = self._ambient_targets(dataset, task, vids)
        self.kp2d = torch.from_numpy(np.stack([c.gt.kp2d for c in dataset]).astype(np.float32))
        self.kp2d_vis = torch.from_numpy(np.stack([c.gt.visibility for c in dataset]).astype(bool))
        kp3d = np.stack([c.gt.kp3d for c in dataset]).astype(np.float32)
        self.kp3d = torch.from_numpy(kp3d - kp3d[:, :, :1])

    @staticmethod
    def _encode(codec, videos, chunk=4):
        return torch.cat([codec.encode_tensor(torch.from_numpy(videos[i:i + chunk]))
                          for i in range(0, len(videos), chunk)])

    @staticmethod
    def _ambient_targets(dataset, task, vids):
        valid = torch.from_numpy(np.stack([c.gt.validity for c in dataset]) > 0.5)
        if task == "normal":
            return torch.from_numpy(np.stack([c.gt.normals for c in dataset]).astype(np.float32)), valid
        if task == "depth":
            return torch.from_numpy(np.stack(vids)[..., 0]), valid
        return torch.from_numpy(np.stack(vids)), None


def _dense_ambient_loss(task, rgb, target, mask):
    if task == "normal":
        return normal_loss(2.0 * rgb - 1.0, target, mask)
    if task == "depth":
        # statistics are per video, so each batch element is normalized on its own
        disp = rgb.mean(-1)
        return torch.stack([ssi_depth_loss(d, g, m) for d, g, m in zip(disp, target, mask)]).mean()
    return l2_loss(rgb, target)


def _keypoint_batch_loss(backbone, q_out, task, data, idx):
    pred = backbone.keypoint_head(q_out, task)
    if task == "kp2d":
        return keypoint_loss(KeypointSet(pred, "image"), KeypointSet(data.kp2d[idx], "image", data.kp2d_vis[idx]))
    return keypoint_loss(KeypointSet(pred, "root_relative"), KeypointSet(data.kp3d[idx], "root_relative"))


# -- loop ------------------------------------------------------------------------------------

def _grad_norm(params):
    sq = sum(float((p.grad.double() ** 2).sum()) for p in params if p.grad is not None)
    return math.sqrt(sq)


def _rng_from_state(seed, state):
    rng = np.random.default_rng(seed)
    if state is not None:
        rng.bit_generator.state = state
    return rng


def _run(cfg, backbone, codec, params, step_loss, checkpoint_in=None, resume=None, stop_at=None,
         log_path=None):
    """Shared optimization loop.  ``step_loss(rng) -> (loss, task)``."""
    opt = torch.optim.Adam(params, lr=cfg.base_lr, betas=(0.9, 0.999), weight_decay=0.0)
    start, history = 0, []
    rng_state = None
    if resume is not None:
        if resume.stage != cfg.stage or resume.config_hash != cfg.digest():
            raise TrainConfigError("resume checkpoint belongs to a different stage or config")
        opt.load_state_dict(resume.optimizer)
        start, history, rng_state = resume.step, list(resume.history), resume.rng_state
    rng = _rng_from_state(cfg.seed, rng_state)
    logger = MetricsLog(log_path)
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    for step in range(start, end):
        lr = lr_schedule(step + 1, cfg.steps, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        opt.zero_grad(set_to_none=True)
        loss, task = step_loss(rng)
        if not torch.isfinite(loss):
            raise TrainingDiverged(f"{cfg.stage} loss became {loss.item()} at step {step} (task {task})")
        loss.backward()
        norm = _grad_norm(params)
        decision = grad_control(norm, cfg)
        if decision.skip:
            log.warning("step %d: gradient norm %.3g above %.3g, batch dropped", step, norm, cfg.drop_norm)
        else:
            if decision.factor != 1.0:
                for p in params:
                    if p.grad is not None:
                        p.grad.mul_(decision.factor)
            opt.step()
        rec = {"stage": cfg.stage, "step": step, "task": task, "loss": float(loss.item()),
               "grad_norm": norm, "lr": lr, "skipped": decision.skip}
        history.append(rec)
        logger.write(rec)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = [h["loss"] for h in history[-cfg.log_every:]]
            log.info("%s step %d loss %.5f", cfg.stage, step + 1, float(np.mean(recent)))
    opt.zero_grad(set_to_none=True)
    return Checkpoint(backbone, codec, cfg.stage, end, cfg.digest(), copy.deepcopy(opt.state_dict()),
                      rng.bit_generator.state, history)


def _sample_indices(rng, n, batch):
    return np.sort(rng.choice(n, size=batch, replace=batch > n))


def _require(condition, message):
    if not condition:
        raise TrainConfigError(message)


def pretrain_generative(dataset, codec, cfg=None, backbone_config=None, resume=None, stop_at=None,
                        log_path=None):
    """Rectified-flow training on RGB latents under the reserved ``generate`` prompt."""
    cfg = cfg or TrainConfig(stage="pretrain")
    _require(cfg.stage == "pretrain", "pretrain_generative needs stage='pretrain'")
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    data = PreparedData(dataset, codec, tasks=())
    if resume is not None:
        backbone = copy.deepcopy(resume.backbone)
    else:
        z = data.rgb_latents
        bcfg = backbone_config or BackboneConfig()
        bcfg = replace(bcfg, latent_channels=z.shape[-1], latent_grid=tuple(z.shape[1:4]),
                       frames=dataset[0].rgb.shape[0], num_keypoints=dataset[0].gt.kp3d.shape[1])
        backbone = Backbone(bcfg)
    backbone.train()
    params = [p for p in backbone.parameters()]

    def step_loss(rng):
        idx = _sample_indices(rng, data.n, cfg.batch_size)
        x0 = data.rgb_latents[idx]
        t = torch.from_numpy(sample_timesteps(rng, len(idx)))
        eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
        tb = t[:, None, None, None, None]
        v, _ = backbone((1 - tb) * x0 + tb * eps, GENERATE, t)
        return rectified_flow_loss(v, x0, eps), GENERATE

    return _run(cfg, backbone, codec, params, step_loss, resume=resume, stop_at=stop_at, log_path=log_path)


def _configure_backbone(backbone, cfg):
    backbone.config = replace(backbone.config, perception_timestep=cfg.input_timestep,
                              mask_query_tokens=backbone.config.mask_query_tokens
                              if cfg.mask_query_tokens is None else cfg.mask_query_tokens)


def _start(checkpoint, resume):
    src = resume if resume is not None else checkpoint
    backbone = copy.deepcopy(src.backbone)
    codec = copy.deepcopy(src.codec)
    return backbone, codec


def _active_tasks(cfg):
    return tuple(t for t in TASKS if cfg.task_weights.get(t, 0) > 0)


def train_stage1(dataset, checkpoint, cfg=None, resume=None, stop_at=None, log_path=None):
    """Latent-space fine-tune: ``-v`` regresses the encoded target modality; codec frozen."""
    cfg = cfg or TrainConfig(stage="latent")
    _require(cfg.stage == "latent", "train_stage1 needs stage='latent'")
    backbone, codec = _start(checkpoint, resume)
    _configure_backbone(backbone, cfg)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    data = PreparedData(dataset, codec, tasks=_active_tasks(cfg))
    backbone.train()
    params = list(backbone.parameters())
    t_in = cfg.input_timestep

    def step_loss(rng):
        task = sample_task(rng, cfg.task_weights)
        idx = _sample_indices(rng, data.n, cfg.batch_size)
        v, q = backbone(data.rgb_latents[idx], task, torch.full((len(idx),), t_in), queries=True)
        if task in KEYPOINT_TASKS:
            return _keypoint_batch_loss(backbone, q, task, data, idx), task
        return F.mse_loss(-v, data.latent_targets[task][idx]), task

    return _run(cfg, backbone, codec, params, step_loss, resume=resume, stop_at=stop_at, log_path=log_path)


def train_stage2(dataset, checkpoint, cfg=None, resume=None, stop_at=None, log_path=None):
    """Ambient-space fine-tune: task losses after decoding; encoder frozen, decoder optional."""
    cfg = cfg or TrainConfig(stage="ambient", steps=1000, batch_size=2)
    _require(cfg.stage == "ambient", "train_stage2 needs stage='ambient'")
    backbone, codec = _start(checkpoint, resume)
    _configure_backbone(backbone, cfg)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    dec = codec.decoder_parameters() if cfg.train_decoder else []
    for p in dec:
        p.requires_grad_(True)
    data = PreparedData(dataset, codec, tasks=_active_tasks(cfg), with_ambient=True)
    backbone.train()
    params = list(backbone.parameters()) + dec
    t_in = cfg.input_timestep

    def step_loss(rng):
        task = sample_task(rng, cfg.task_weights)
        idx = _sample_indices(rng, data.n, cfg.batch_size)
        v, q = backbone(data.rgb_latents[idx], task, torch.full((len(idx),), t_in), queries=True)
        if task in KEYPOINT_TASKS:
            return _keypoint_batch_loss(backbone, q, task, data, idx), task
        rgb = codec.decode_tensor(-v, clamp=False)
        target, mask = data.ambient[task]
        return _dense_ambient_loss(task, rgb, target[idx], None if mask is None else mask[idx]), task

    ck = _run(cfg, backbone, codec, params, step_loss, resume=resume, stop_at=stop_at, log_path=log_path)
    for p in codec.parameters():
        p.requires_grad_(False)
    return ck
