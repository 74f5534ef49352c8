"""Raster and table writers for predictions, plus side-by-side inspection panels."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .perception import KeypointSet, ModalityVideo, encode_modality

PANEL_SCALE = 4
FOOTERS = {
    "normal": "normals shown as (n+1)/2",
    "depth": "depth shown as per-video min-max disparity",
    "segmentation": "alpha as grey level",
    "semantics": "part palette colours",
    "kp2d": "red: prediction, green: ground truth",
    "kp3d": "root-relative x/y, red: prediction, green: ground truth",
}


def to_uint8(frames):
    return (np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def save_modality_video(out_dir, mv):
    """One lossless 8-bit PNG per frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = to_uint8(mv.values if isinstance(mv, ModalityVideo) else mv)
    paths = []
    for i, f in enumerate(frames):
        paths.append(out / f"frame_{i:04d}.png")
        Image.fromarray(f).save(paths[-1])
    return paths


def save_keypoints_csv(path, coords, visibility=None):
    """Rows of ``frame, joint, x, y[, z], visible`` (visibility blank when unknown)."""
    coords = np.asarray(coords)
    axes = ["x", "y", "z"][:coords.shape[-1]]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "joint", *axes, "visible"])
        for t in range(coords.shape[0]):
            for j in range(coords.shape[1]):
                vis = "" if visibility is None else int(visibility[t, j])
                w.writerow([t, j, *(f"{c:.6f}" for c in coords[t, j]), vis])
    return path


def _upscale(frame):
    return np.kron(frame, np.ones((PANEL_SCALE, PANEL_SCALE, 1), dtype=frame.dtype))


def _draw_points(img, pts, colour, H, W):
    d = ImageDraw.Draw(img)
    for u, v in pts:
        x, y = u * W * PANEL_SCALE, v * H * PANEL_SCALE
        d.ellipse([x - 2, y - 2, x + 2, y + 2], fill=colour)


def _kp3d_canvas(H, W):
    return Image.new("RGB", (W * PANEL_SCALE, H * PANEL_SCALE), (0, 0, 0))


def _kp3d_to_canvas(p):
    # root-relative metres -> canvas: 1 m spans half the canvas height
    return np.stack([0.5 + p[:, 0] / 2.0, 0.5 + p[:, 1] / 2.0], axis=-1)


def save_panels(out_dir, rgb, pred, task, gt=None):
    """Per frame: input | prediction | ground truth (when available), with a footer."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rgb8 = to_uint8(rgb)
    T, H, W = rgb8.shape[:3]
    footer = 14
    paths = []
    for t in range(T):
        tiles = [Image.fromarray(_upscale(rgb8[t]))]
        if isinstance(pred, KeypointSet):
            if task == "kp2d":
                p = tiles[0].copy()
                _draw_points(p, pred.coords[t], (255, 0, 0), H, W)
                if gt is not None:
                    _draw_points(p, gt.kp2d[t][gt.visibility[t] > 0], (0, 255, 0), H, W)
                tiles.append(p)
            else:
                p = _kp3d_canvas(H, W)
                _draw_points(p, _kp3d_to_canvas(pred.coords[t]), (255, 0, 0), H, W)
                if gt is not None:
                    _draw_points(p, _kp3d_to_canvas(gt.kp3d[t] - gt.kp3d[t, :1]), (0, 255, 0), H, W)
                tiles.append(p)
        else:
            tiles.append(Image.fromarray(_upscale(to_uint8(pred.values[t]))))
            if gt is not None:
                tiles.append(Image.fromarray(_upscale(to_uint8(encode_modality(gt, task).values[t]))))
        panel = Image.new("RGB", (sum(x.width for x in tiles), tiles[0].height + footer), (255, 255, 255))
        x = 0
        for tile in tiles:
            panel.paste(tile, (x, 0))
            x += tile.width
        ImageDraw.Draw(panel).text((2, tiles[0].height + 1), FOOTERS[task], fill=(0, 0, 0))
        paths.append(out / f"panel_{t:04d}.png")
        panel.save(paths[-1])
    return paths
