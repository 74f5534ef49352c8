"""Self-contained oracle and invariant checks, runnable without the test suite.

Each check returns ``(ok, detail)``; :func:`run_selftest` collects them.
"""
from __future__ import annotations

import math
import statistics
import tempfile
import time

import numpy as np
import torch

from .backbone import apply_rope, rope3d_angles
from .codec import dry_run_shapes
from .datagen.io import ClipDataset, generate_dataset
from .datagen.render import render_clip
from .datagen.scene import ArticulatedFigure, CameraModel, GenConfig, Motion, SceneSpec
from .losses import keypoint_loss, l2_loss, normal_loss, rectified_flow_loss, ssi_depth_loss
from .metrics import depth_metrics, evaluate_dataset, matting_metrics, pose_metrics, procrustes_align
from .perception import TASKS, KeypointSet


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def check_losses():
    g = torch.Generator().manual_seed(0)
    y = torch.nn.functional.normalize(torch.randn(2, 4, 4, 3, generator=g, dtype=torch.float64), dim=-1)
    d = torch.rand(2, 4, 4, generator=g, dtype=torch.float64) + 0.1
    k = torch.rand(2, 5, 2, generator=g, dtype=torch.float64)
    kps = KeypointSet(k, "image", np.ones((2, 5)))
    vals = [normal_loss(y, y), ssi_depth_loss(3.0 * d + 2.0, d), l2_loss(d[..., None], d[..., None]),
            keypoint_loss(kps, kps), rectified_flow_loss(y, torch.zeros_like(y), y)]
    worst = max(abs(v.item()) for v in vals)
    # 2x2 scale-shift invariant case against a longhand midpoint-median / mean-deviation oracle
    p, t = [0.2, 0.9, 0.4, 0.7], [1.0, 3.0, 2.0, 5.0]

    def norm(xs):
        med = statistics.median(xs)
        mad = sum(abs(x - med) for x in xs) / len(xs)
        return [(x - med) / mad for x in xs]
    ref = sum(abs(a - b) for a, b in zip(norm(p), norm(t))) / 4
    got = ssi_depth_loss(torch.tensor(p, dtype=torch.float64).reshape(1, 2, 2),
                         torch.tensor(t, dtype=torch.float64).reshape(1, 2, 2)).item()
    ok = worst < 1e-6 and abs(got - ref) < 1e-9
    return ok, f"zero-at-target residual {worst:.1e}, ssi oracle diff {abs(got - ref):.1e}"


def check_rope(n=1000, head_dim=32):
    g = torch.Generator().manual_seed(0)
    x, y = (torch.randn(n, head_dim, generator=g, dtype=torch.float64) for _ in range(2))
    p, q = (torch.rand(n, 3, generator=g, dtype=torch.float64) * 20 for _ in range(2))
    ang = lambda pos: rope3d_angles(pos[:, 0], pos[:, 1], pos[:, 2], head_dim)
    norm_err = (apply_rope(x, ang(p)).norm(dim=-1) - x.norm(dim=-1)).abs().max().item()
    base = (apply_rope(x, ang(p)) * apply_rope(y, ang(q))).sum(-1)
    shift_err = 0.0
    for axis in range(3):
        delta = torch.zeros(n, 3, dtype=torch.float64)
        delta[:, axis] = torch.rand(n, generator=g, dtype=torch.float64) * 50 - 25
        moved = (apply_rope(x, ang(p + delta)) * apply_rope(y, ang(q + delta))).sum(-1)
        shift_err = max(shift_err, (moved - base).abs().max().item())
    return norm_err < 1e-6 and shift_err < 1e-5, f"norm {norm_err:.1e}, shift {shift_err:.1e}"


def check_shapes():
    full, _ = dry_run_shapes(81, 480, 832)
    desk, _ = dry_run_shapes(17, 64, 64)
    ok = tuple(full[:3]) == (21, 60, 104) and tuple(desk[:3]) == (5, 8, 8)
    return ok, f"81x480x832 -> {tuple(full[:3])}, 17x64x64 -> {tuple(desk[:3])}"


def check_metrics(n=100):
    rng = np.random.default_rng(0)
    worst_pa, violations = 0.0, 0
    for _ in range(n):
        gt = rng.normal(size=(4, 8, 3))
        sim = 1.7 * gt @ _random_rotation(rng).T + rng.normal(size=3)
        worst_pa = max(worst_pa, pose_metrics(sim, gt, 24.0)["pa_mpjpe"])
        noisy = gt + 0.05 * rng.normal(size=gt.shape)
        m = pose_metrics(noisy, gt, 24.0)
        violations += m["pa_mpjpe"] > m["mpjpe"] + 1e-9
    line = rng.normal(size=(1, 8, 3)) + np.arange(6)[:, None, None] * rng.normal(size=(1, 8, 3)) * 0.1
    accel = pose_metrics(line, line + 0.3, 24.0)["accel"]
    a = rng.uniform(size=(3, 16, 16))
    matting = max(abs(v) for v in matting_metrics(a, a).values())
    z = rng.uniform(1, 5, size=(8, 8))
    dm = depth_metrics(2.0 / z + 0.5, z)
    depth = max(dm.values())
    X = rng.normal(size=(8, 3))
    sol = procrustes_align(X, 2 * X @ _random_rotation(rng).T + 1)
    ok = worst_pa < 1e-9 and accel < 1e-9 and matting < 1e-9 and depth < 1e-9 and sol.scale > 0
    return ok, (f"PA of similarity {worst_pa:.1e}, PA>MPJPE on {violations}/{n}, accel {accel:.1e}, "
                f"matting {matting:.1e}, affine depth {depth:.1e}")


def sphere_scene(radius=0.5, distance=3.0, size=64, focal=100.0):
    fig = ArticulatedFigure(parents=(-1, 0), rest_offsets=np.zeros((2, 3)),
                            radii=np.array([0.0, radius]), part_ids=(0, 0))
    motion = Motion(euler=np.zeros((1, 2, 3)), root_translation=np.array([[0.0, 0.0, distance]]))
    cam = CameraModel(focal_length_px=focal, principal_point=np.array([size / 2 + 0.5] * 2),
                      rotations=np.eye(3)[None], translations=np.zeros((1, 3)), width=size, height=size)
    return SceneSpec(seed=0, figure=fig, motion=motion, camera=cam, background=None,
                     albedo=np.full((10, 3), 0.8), frames=1, height=size, width=size)


def check_datagen():
    _, gt = render_clip(sphere_scene())
    depth_err = abs(float(gt.depth[0, 32, 32]) - 2.5)
    normal_err = float(np.abs(gt.normals[0, 32, 32] - [0, 0, -1]).max())
    ok = depth_err < 1e-5 and normal_err < 1e-5 and gt.alpha[0, 32, 32] == 1 and gt.alpha[0, 0, 0] == 0
    return ok, f"sphere depth {depth_err:.1e}, normal {normal_err:.1e}"


def check_oracle_eval(clips=2):
    cfg = GenConfig(frames=5)
    with tempfile.TemporaryDirectory() as d:
        generate_dataset(d, list(range(clips)), cfg)
        report = evaluate_dataset(None, ClipDataset(d), TASKS, oracle=True)
    errors, rates = {}, {}
    for t, m in report["tasks"].items():
        for k, v in m.items():
            if v is not None:
                # accuracies and threshold hit rates are percentages where the oracle scores 100
                (rates if "accuracy" in k or "pct" in k else errors)[f"{t}.{k}"] = v
    worst = max(abs(v) for v in errors.values())
    ok = worst < 1e-9 and all(math.isclose(v, 100.0) for v in rates.values())
    return ok, f"{len(errors)} error metrics, max {worst:.1e}; lowest rate {min(rates.values()):.1f}%"


CHECKS = {
    "losses": check_losses,
    "rope": check_rope,
    "shapes": check_shapes,
    "metrics": check_metrics,
    "datagen": check_datagen,
    "oracle-eval": check_oracle_eval,
}


def run_selftest(names=None):
    """Run checks by name; returns a list of ``(name, ok, detail, seconds)``."""
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as e:  # a crashing check is a failed check
            ok, detail = False, f"{type(e).__name__}: {e}"
        results.append((name, bool(ok), detail, time.perf_counter() - t0))
    return results
