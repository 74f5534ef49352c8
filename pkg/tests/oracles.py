"""Brute-force reference computations, deliberately independent of the package code paths."""
import math
import statistics

import numpy as np

from perceptflow.datagen.scene import (ArticulatedFigure, CameraModel, Motion, SceneSpec,
                                       pose_figure)


def point_segment_distance(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    h = 0.0 if denom == 0 else min(1.0, max(0.0, float((p - a) @ ab) / denom))
    return float(np.linalg.norm(p - (a + h * ab)))


def capsules_in_camera(scene, frame):
    _, world = pose_figure(scene.figure, scene.motion, frame)
    R, t = scene.camera.rotations[frame], scene.camera.translations[frame]
    joints = world @ R.T + t
    caps = [(joints[p], joints[j], scene.figure.radii[j]) for p, j in scene.figure.bones()]
    return joints, caps


def union_sdf(p, caps):
    return min(point_segment_distance(p, a, b) - r for a, b, r in caps)


def first_occupied_along(target, caps, samples=20000):
    """Distance from the camera origin to the first sample point inside any capsule
    on the segment towards ``target`` (inf if none)."""
    length = float(np.linalg.norm(target))
    d = target / length
    for s in np.linspace(0.0, length, samples):
        if union_sdf(s * d, caps) < 0:
            return s
    return math.inf


def ssi_reference(pred, gt):
    """Scale-shift invariant absolute error on flat lists, written out longhand."""
    def norm(xs):
        med = statistics.median(xs)
        mad = sum(abs(x - med) for x in xs) / len(xs)
        return [(x - med) / mad for x in xs]
    p, g = norm(list(pred)), norm(list(gt))
    return sum(abs(a - b) for a, b in zip(p, g)) / len(p)


def least_squares_affine(x, y):
    """Solve min_{a,b} sum (a x + b - y)^2 via numpy lstsq on the design matrix."""
    A = np.stack([np.asarray(x, float), np.ones(len(x))], axis=1)
    (a, b), *_ = np.linalg.lstsq(A, np.asarray(y, float), rcond=None)
    return a, b


def sphere_scene(radius=0.5, distance=3.0, size=64, focal=100.0, frames=2):
    """A lone sphere on the optical axis; the principal point sits on pixel (size/2, size/2)'s centre."""
    fig = ArticulatedFigure(parents=(-1, 0), rest_offsets=np.zeros((2, 3)),
                            radii=np.array([0.0, radius]), part_ids=(0, 0))
    motion = Motion(euler=np.zeros((frames, 2, 3)),
                    root_translation=np.tile([0.0, 0.0, distance], (frames, 1)))
    cam = CameraModel(focal_length_px=focal, principal_point=np.array([size / 2 + 0.5] * 2),
                      rotations=np.tile(np.eye(3), (frames, 1, 1)),
                      translations=np.zeros((frames, 3)), width=size, height=size)
    return SceneSpec(seed=0, figure=fig, motion=motion, camera=cam, background=None,
                     albedo=np.full((10, 3), 0.8), frames=frames, height=size, width=size)


def finite_difference_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def _union_sdf_many(P, caps):
    best = np.full(len(P), np.inf)
    for a, b, r in caps:
        ab = b - a
        denom = ab @ ab
        h = np.zeros(len(P)) if denom == 0 else np.clip((P - a) @ ab / denom, 0, 1)
        best = np.minimum(best, np.linalg.norm(P - (a + h[:, None] * ab), axis=1) - r)
    return best


def clip_invariants(scene, gt):
    """Measured residuals of the renderer's geometric contracts for one clip."""
    cam = scene.camera
    H, W = scene.height, scene.width
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    rays = np.stack([(jj - cam.principal_point[0]) / cam.focal_length_px,
                     (ii - cam.principal_point[1]) / cam.focal_length_px, np.ones_like(jj)], -1)
    surf_err, angle_err, proj_err = [], [], []
    for f in range(scene.frames):
        _, caps = capsules_in_camera(scene, f)
        interior = (gt.alpha[f] == 1) & (gt.semantics[f].sum(-1) > 0)
        P = rays[interior] * gt.depth[f][interior][:, None]
        surf_err.append(np.abs(_union_sdf_many(P, caps)))
        h = 1e-5
        grad = np.stack([(_union_sdf_many(P + h * e, caps) - _union_sdf_many(P - h * e, caps)) / (2 * h)
                         for e in np.eye(3)], axis=1)
        grad /= np.linalg.norm(grad, axis=1, keepdims=True)
        cosang = np.clip((grad * gt.normals[f][interior]).sum(1), -1, 1)
        angle_err.append(np.degrees(np.arccos(cosang)))
        k = gt.kp3d[f].astype(np.float64)
        u = (cam.focal_length_px * k[:, 0] / k[:, 2] + cam.principal_point[0]) / W
        v = (cam.focal_length_px * k[:, 1] / k[:, 2] + cam.principal_point[1]) / H
        vis = gt.visibility[f] == 1
        proj_err.append(np.hypot((u - gt.kp2d[f, :, 0]) * W, (v - gt.kp2d[f, :, 1]) * H)[vis])
    return {
        "surface": np.concatenate(surf_err),
        "normal_deg": np.concatenate(angle_err),
        "projection_px": np.concatenate(proj_err),
    }
