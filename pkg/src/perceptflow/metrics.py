"""Evaluation suite: normal angles, aligned depth, matting quality, 3D pose errors."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .perception import (KEYPOINT_TASKS, check_task, decode_modality,
                         nearest_palette, predict)

log = logging.getLogger(__name__)

ANGLE_THRESHOLDS = (11.25, 22.5, 30.0)
DISP_FLOOR = 1e-6
GRAD_SIGMA = 1.4
GRAD_RADIUS = 5
CONN_STEP = 0.1
CONN_DELTA = 0.15
MAD_SCALE = 1e3
MSE_SCALE = 1e3
CONN_SCALE = 1e-3
DTSSD_SCALE = 1e2

REPORT_CONSTANTS = {
    "angle_thresholds_deg": list(ANGLE_THRESHOLDS), "median": "lower-middle",
    "depth_alignment": "least-squares scale+shift in disparity over the masked video",
    "disparity_floor": DISP_FLOOR, "grad_sigma": GRAD_SIGMA, "grad_radius": GRAD_RADIUS,
    "conn_step": CONN_STEP, "conn_delta": CONN_DELTA, "mad_scale": MAD_SCALE, "mse_scale": MSE_SCALE,
    "conn_scale": CONN_SCALE, "dtssd_scale": DTSSD_SCALE, "mpjpe": "root-aligned, mm",
    "accel_units": "m/s^2",
}


class DegenerateAlignmentError(ValueError):
    """The source points of a Procrustes fit span fewer than two dimensions."""


class MissingModalityError(KeyError):
    pass


def lower_median(x):
    """Median with the lower-middle element for even counts."""
    s = np.sort(np.asarray(x).ravel())
    if s.size == 0:
        raise ValueError("median of an empty set")
    return float(s[(s.size - 1) // 2])


def _mask(mask, shape):
    m = np.ones(shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask) > 0.5, shape)
    if not m.any():
        raise ValueError("mask selects no pixels")
    return m


# -- normals ----------------------------------------------------------------------

def angular_error(pred_n, gt_n, mask=None):
    """Angular statistics in degrees over the masked pixels of all frames.

    Predictions are renormalized; a zero prediction counts as 90 degrees.
    """
    p = np.asarray(pred_n, dtype=np.float64)
    g = np.asarray(gt_n, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    m = _mask(mask, p.shape[:-1])
    p, g = p[m], g[m]
    # atan2 of |p x g| and p.g is well-conditioned near 0 and 180 degrees, unlike arccos
    ang = np.degrees(np.arctan2(np.linalg.norm(np.cross(p, g), axis=-1), (p * g).sum(-1)))
    ang[np.linalg.norm(p, axis=-1) == 0] = 90.0
    out = {"mean": float(ang.mean()), "median": lower_median(ang)}
    for th in ANGLE_THRESHOLDS:
        out[f"pct_{th:g}"] = float(100.0 * np.mean(ang < th))
    return out


# -- depth --------------------------------------------------------------------------

def fit_scale_shift(x, y):
    """Closed-form least squares ``min_{a,b} sum (a x + b - y)^2``; shift-only if ``x`` is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    sxx, sx, sxy, sy = (x * x).sum(), x.sum(), (x * y).sum(), y.sum()
    det = n * sxx - sx * sx
    if det <= 1e-12 * max(n * sxx, 1e-300):
        return 1.0, float((y - x).mean())
    return float((n * sxy - sx * sy) / det), float((sxx * sy - sx * sxy) / det)


def depth_metrics(pred_disp, gt_depth, mask=None, align=True):
    """Aligned-depth RMSE (metres) and AbsRel over the masked video volume."""
    p = np.asarray(pred_disp, dtype=np.float64)
    z = np.asarray(gt_depth, dtype=np.float64)
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {z.shape}")
    m = _mask(mask, z.shape)
    p, z = p[m], z[m]
    if np.any(z <= 0):
        raise ValueError("ground-truth depth must be positive on the mask")
    if align:
        a, b = fit_scale_shift(p, 1.0 / z)
        p = a * p + b
    z_hat = 1.0 / np.maximum(p, DISP_FLOOR)
    return {"rmse": float(np.sqrt(np.mean((z_hat - z) ** 2))),
            "absrel": float(np.mean(np.abs(z_hat - z) / z))}


# -- matting --------------------------------------------------------------------------

def _grad_magnitude(a):
    kw = dict(sigma=GRAD_SIGMA, truncate=GRAD_RADIUS / GRAD_SIGMA, mode="nearest")
    gx = ndimage.gaussian_filter(a, order=(0, 1), **kw)
    gy = ndimage.gaussian_filter(a, order=(1, 0), **kw)
    return np.hypot(gx, gy)


def _largest_component(binary):
    labels, n = ndimage.label(binary)  # default structure: 4-connectivity
    if n == 0:
        return np.zeros_like(binary)
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (np.argmax(sizes) + 1)


def connectivity_error(pred, gt):
    """Connectivity error of one frame, unscaled."""
    steps = np.arange(0.0, 1.0 + CONN_STEP / 2, CONN_STEP)
    level = np.full(gt.shape, -1.0)
    for i in range(1, len(steps)):
        omega = _largest_component((pred >= steps[i]) & (gt >= steps[i]))
        drop = (level == -1) & ~omega
        level[drop] = steps[i - 1]
    level[level == -1] = 1.0
    dp, dg = pred - level, gt - level
    phi_p = 1.0 - dp * (dp >= CONN_DELTA)
    phi_g = 1.0 - dg * (dg >= CONN_DELTA)
    return float(np.abs(phi_p - phi_g).sum())


def matting_metrics(pred_a, gt_a):
    """MAD, MSE (x1e3), Grad, Conn (x1e-3, per-frame mean) and dtSSD (x1e2)."""
    p = np.asarray(pred_a, dtype=np.float64)
    g = np.asarray(gt_a, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if p.ndim == 2:
        p, g = p[None], g[None]
    d = p - g
    out = {"mad": float(np.abs(d).mean() * MAD_SCALE), "mse": float((d ** 2).mean() * MSE_SCALE)}
    out["grad"] = float(np.mean([np.mean((_grad_magnitude(a) - _grad_magnitude(b)) ** 2)
                                 for a, b in zip(p, g)]))
    out["conn"] = float(np.mean([connectivity_error(a, b) for a, b in zip(p, g)]) * CONN_SCALE)
    if p.shape[0] >= 2:
        dd = np.diff(p, axis=0) - np.diff(g, axis=0)
        out["dtssd"] = float(np.sqrt(np.mean(dd ** 2)) * DTSSD_SCALE)
    else:
        out["dtssd"] = None
    return out


# -- pose ----------------------------------------------------------------------------

@dataclass
class AlignmentSolution:
    scale: float
    rotation: np.ndarray | None
    shift: np.ndarray | float

    def apply(self, X):
        X = np.asarray(X, dtype=np.float64)
        return self.scale * X @ self.rotation.T + self.shift


def procrustes_align(X, Y):
    """Similarity transform ``(s, R, t)`` minimizing ``|s R X + t - Y|_F^2``, R proper."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError(f"expected matching K x 3 arrays, got {X.shape} and {Y.shape}")
    if X.shape[0] < 3:
        raise ValueError("procrustes alignment needs at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sv = np.linalg.svd(Xc, compute_uv=False)
    if sv[1] <= 1e-12 * max(sv[0], 1e-300):
        raise DegenerateAlignmentError("degenerate configuration: centred source points have rank < 2")
    U, S, Vt = np.linalg.svd(Yc.T @ Xc / len(X))
    D = np.ones(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2] = -1.0
    R = (U * D) @ Vt
    s = float((S * D).sum() / (Xc ** 2).sum(1).mean())
    return AlignmentSolution(s, R, my - s * R @ mx)


def pose_metrics(pred3d, gt3d, fps):
    """MPJPE and PA-MPJPE in mm, Accel in m/s^2, for T x K x 3 sequences in metres."""
    p = np.asarray(pred3d, dtype=np.float64)
    g = np.asarray(gt3d, dtype=np.float64)
    if p.shape != g.shape or p.ndim != 3:
        raise ValueError(f"expected matching T x K x 3 arrays, got {p.shape} and {g.shape}")
    pr, gr = p - p[:, :1], g - g[:, :1]
    mpjpe = np.linalg.norm(pr - gr, axis=-1).mean() * 1e3
    # a collapsed prediction (e.g. an untrained head) has no defined alignment; such
    # frames are left out of PA-MPJPE and counted instead of failing the whole report
    pa, degenerate = [], 0
    for a, b in zip(p, g):
        try:
            pa.append(np.linalg.norm(procrustes_align(a, b).apply(a) - b, axis=-1).mean() * 1e3)
        except DegenerateAlignmentError:
            degenerate += 1
    if degenerate:
        log.warning("PA-MPJPE: %d of %d predicted frames are degenerate and were skipped", degenerate, len(p))
    out = {"mpjpe": float(mpjpe), "pa_mpjpe": float(np.mean(pa)) if pa else None, "accel": None,
           "pa_degenerate_frames": degenerate}
    if len(p) >= 3:
        acc = lambda x: (x[2:] - 2 * x[1:-1] + x[:-2]) * fps ** 2
        out["accel"] = float(np.linalg.norm(acc(p) - acc(g), axis=-1).mean())
    return out


def keypoint2d_error(pred, gt, visibility=None):
    """Mean Euclidean error in normalized image units over visible joints."""
    err = np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=-1)
    if visibility is not None:
        vis = np.asarray(visibility) > 0
        if not vis.any():
            return None
        err = err[vis]
    return float(err.mean())


# -- dataset evaluation -----------------------------------------------------------------

_REQUIRED = {"normal": ("normals",), "depth": ("depth",), "segmentation": ("alpha",),
             "semantics": ("semantics", "alpha"), "kp2d": ("kp2d", "visibility"), "kp3d": ("kp3d",)}


def _gt_part_ids(gt, palette):
    ids = nearest_palette(gt.semantics, palette)
    ids[np.asarray(gt.alpha) <= 0.5] = -1
    return ids


def _native_prediction(clip, task, models, palette):
    """Task-native prediction for one clip; ``models=None`` feeds the ground truth."""
    gt = clip.gt
    if models is None:
        return {"normal": lambda: gt.normals, "depth": lambda: 1.0 / np.asarray(gt.depth, np.float64),
                "segmentation": lambda: gt.alpha, "semantics": lambda: _gt_part_ids(gt, palette),
                "kp2d": lambda: gt.kp2d, "kp3d": lambda: gt.kp3d - gt.kp3d[:, :1]}[task]()
    codec, backbone = models
    out = predict(clip.rgb, task, codec, backbone)
    if task in KEYPOINT_TASKS:
        return out.coords
    if task == "semantics":
        return decode_modality(out, task, palette)[0]
    # depth: the channel mean is a normalized disparity, aligned downstream
    return decode_modality(out, task)


def _clip_metrics(clip, task, pred, fps, palette):
    gt = clip.gt
    figure = np.asarray(gt.alpha) > 0.5
    valid = np.asarray(gt.validity) > 0.5
    if task == "normal":
        out = {f"scene_{k}": v for k, v in angular_error(pred, gt.normals, valid).items()}
        if figure.any():
            out.update({f"figure_{k}": v for k, v in angular_error(pred, gt.normals, figure).items()})
        return out
    if task == "depth":
        out = {f"scene_{k}": v for k, v in depth_metrics(pred, gt.depth, valid).items()}
        if figure.any():
            out.update({f"figure_{k}": v for k, v in depth_metrics(pred, gt.depth, figure).items()})
        return out
    if task == "segmentation":
        return matting_metrics(np.clip(pred, 0.0, 1.0), gt.alpha)
    if task == "semantics":
        ids = _gt_part_ids(gt, palette)
        out = {"pixel_accuracy": float(100.0 * np.mean(pred == ids))}
        if (ids >= 0).any():
            out["figure_accuracy"] = float(100.0 * np.mean(pred[ids >= 0] == ids[ids >= 0]))
        return out
    if task == "kp2d":
        return {"kp2d_error": keypoint2d_error(pred, gt.kp2d, gt.visibility)}
    return pose_metrics(pred, gt.kp3d - gt.kp3d[:, :1], fps)


def evaluate_dataset(models, dataset, tasks, oracle=False):
    """Per-clip and aggregate metrics for ``tasks`` over ``dataset``.

    ``models`` is a ``(codec, backbone)`` pair; with ``oracle`` set the ground
    truth is scored as the prediction and ``models`` is ignored.
    """
    tasks = [check_task(t) for t in tasks]
    palette = dataset.palette
    rows = []
    for clip in dataset:
        for task in tasks:
            for attr in _REQUIRED[task]:
                if getattr(clip.gt, attr, None) is None:
                    raise MissingModalityError(f"clip {clip.seed} has no {attr!r} ground truth for task {task!r}")
            pred = _native_prediction(clip, task, None if oracle else models, palette)
            rows.append({"seed": clip.seed, "task": task,
                         "metrics": _clip_metrics(clip, task, pred, dataset.fps, palette)})
    summary = {}
    for task in tasks:
        per = [r["metrics"] for r in rows if r["task"] == task]
        keys = sorted({k for m in per for k in m})
        summary[task] = {}
        for k in keys:
            vals = [m[k] for m in per if m.get(k) is not None]
            summary[task][k] = float(np.mean(vals)) if vals else None
    return {"oracle": bool(oracle), "constants": REPORT_CONSTANTS, "tasks": summary, "clips": rows}


def format_report(report):
    lines = ["# evaluation report" + (" (oracle)" if report["oracle"] else "")]
    lines += [f"# {k} = {v}" for k, v in report["constants"].items()]
    lines.append(f"{'task':<14}{'metric':<22}{'value':>14}")
    for task, vals in report["tasks"].items():
        for k, v in vals.items():
            lines.append(f"{task:<14}{k:<22}{'-' if v is None else format(v, '.6g'):>14}")
    lines.append("")
    lines.append(f"{'seed':<8}{'task':<14}{'metric':<22}{'value':>14}")
    for r in report["clips"]:
        for k, v in r["metrics"].items():
            lines.append(f"{r['seed']:<8}{r['task']:<14}{k:<22}{'-' if v is None else format(v, '.6g'):>14}")
    return "\n".join(lines) + "\n"


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return out / "report.json"

