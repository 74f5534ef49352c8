"""Single-step perception: RGB-ambient task encodings and the predict path."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .datagen.scene import PALETTE

log = logging.getLogger(__name__)

DENSE_TASKS = ("depth", "normal", "segmentation", "semantics")
KEYPOINT_TASKS = ("kp2d", "kp3d")
TASKS = DENSE_TASKS + KEYPOINT_TASKS


class UnknownTaskError(KeyError):
    def __init__(self, task, valid=TASKS):
        super().__init__(f"unknown task {task!r}; valid tasks: {', '.join(valid)}")


@dataclass
class ModalityVideo:
    values: np.ndarray          # T x H x W x 3 in [0, 1]
    task: str
    stats: dict = field(default_factory=dict)


@dataclass
class KeypointSet:
    coords: np.ndarray                  # T x K x 2 | T x K x 3
    space: str                          # "image" | "root_relative"
    visibility: np.ndarray | None = None

    def __post_init__(self):
        if self.space not in ("image", "root_relative"):
            raise ValueError(f"unknown keypoint space {self.space!r}")


def check_task(task, allowed=TASKS):
    if task not in allowed:
        raise UnknownTaskError(task, allowed)
    return task


def disparity_range(depth, valid=None):
    disp = 1.0 / np.asarray(depth, dtype=np.float64)
    sel = disp[valid > 0.5] if valid is not None and np.any(valid > 0.5) else disp.ravel()
    return disp, float(sel.min()), float(sel.max())


def normalize_disparity(depth, valid=None):
    """Per-video min-max normalized disparity; a constant video maps to 0.5."""
    disp, lo, hi = disparity_range(depth, valid)
    if hi - lo <= 0:
        return np.full(disp.shape, 0.5), lo, hi
    return np.clip((disp - lo) / (hi - lo), 0.0, 1.0), lo, hi


def encode_modality(bundle, task):
    """Ground truth -> 3-channel video in [0, 1] for a dense task."""
    check_task(task, DENSE_TASKS)
    stats = {}
    if task == "normal":
        vals = (np.asarray(bundle.normals, dtype=np.float64) + 1.0) / 2.0
    elif task == "depth":
        d, lo, hi = normalize_disparity(bundle.depth, getattr(bundle, "validity", None))
        stats = {"disparity_min": lo, "disparity_max": hi}
        vals = np.repeat(d[..., None], 3, axis=-1)
    elif task == "segmentation":
        vals = np.repeat(np.asarray(bundle.alpha, dtype=np.float64)[..., None], 3, axis=-1)
    else:
        vals = np.asarray(bundle.semantics, dtype=np.float64)
    return ModalityVideo(np.clip(vals, 0.0, 1.0).astype(np.float32), task, stats)


def decode_normals(rgb):
    n = 2.0 * np.asarray(rgb, dtype=np.float64) - 1.0
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    out = np.where(norm > 0, n / np.where(norm > 0, norm, 1.0), 0.0)
    out[norm[..., 0] == 0] = (0.0, 0.0, -1.0)
    return out


def nearest_palette(rgb, palette=PALETTE, background=True):
    """Index of the closest palette colour per pixel; -1 is black background."""
    pal = np.asarray(palette, dtype=np.float64)
    if background:
        pal = np.concatenate([np.zeros((1, 3)), pal])
    d = ((np.asarray(rgb, dtype=np.float64)[..., None, :] - pal) ** 2).sum(-1)
    ids = d.argmin(-1)
    return ids - 1 if background else ids


def decode_modality(mv, task=None, palette=PALETTE):
    """3-channel video -> task-native output.

    normal: unit vectors; depth / segmentation: channel mean;
    semantics: ``(part ids, raw rgb)``.
    """
    task = check_task(task or mv.task, DENSE_TASKS)
    vals = mv.values if isinstance(mv, ModalityVideo) else np.asarray(mv)
    if vals.shape[-1] != 3:
        raise ValueError(f"expected 3 channels, got shape {vals.shape}")
    if task == "normal":
        return decode_normals(vals)
    if task in ("depth", "segmentation"):
        return np.asarray(vals, dtype=np.float64).mean(axis=-1)
    return nearest_palette(vals, palette), np.asarray(vals)


def denormalize_disparity(norm_disp, stats):
    lo, hi = stats["disparity_min"], stats["disparity_max"]
    return lo + np.asarray(norm_disp, dtype=np.float64) * (hi - lo)


def predict(video, task, codec, backbone):
    """Single-step prediction for ``task`` on a ``T x H x W x 3`` video.

    The video latents go through exactly one backbone forward at the clean
    end of the flow (``t = 0`` unless the backbone was trained otherwise).
    Dense tasks decode ``-v`` through the codec; keypoint tasks read the
    query-token outputs through the keypoint head.
    """
    from .codec import decode, encode

    check_task(task)
    video = np.asarray(video)
    grid = encode(video, codec)
    dtype = next(backbone.parameters()).dtype
    with torch.no_grad():
        v, q_out = backbone(grid.values.to(dtype), task, backbone.config.perception_timestep, queries=True)
        if task in KEYPOINT_TASKS:
            coords = backbone.keypoint_head(q_out, task).double().numpy()
            space = "image" if task == "kp2d" else "root_relative"
            return KeypointSet(coords, space)
        rgb = decode(grid.replace(-v.to(grid.values.dtype)), codec)
    return ModalityVideo(rgb.clamp(0.0, 1.0).double().numpy().astype(np.float32), task)
