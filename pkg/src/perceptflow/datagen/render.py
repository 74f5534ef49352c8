"""Sphere-traced capsule renderer producing RGB plus exact dense/sparse ground truth."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import PALETTE, pose_figure

LIGHT_DIR = np.array([0.4, 0.8, 0.45]) / np.linalg.norm([0.4, 0.8, 0.45])
TRACE_EPS = 1e-6
MAX_STEPS = 400
_AMBIENT = 0.35


@dataclass
class GroundTruthBundle:
    depth: np.ndarray       # T x H x W, axial distance (m)
    normals: np.ndarray     # T x H x W x 3, camera space, unit
    alpha: np.ndarray       # T x H x W in [0, 1]
    semantics: np.ndarray   # T x H x W x 3, palette colour or black
    kp2d: np.ndarray        # T x K x 2 normalized image coordinates in [0, 1]
    visibility: np.ndarray  # T x K uint8
    kp3d: np.ndarray        # T x K x 3 camera space (m)
    validity: np.ndarray    # T x H x W, 1 where the centre ray hit something

    MODALITIES = ("depth", "normals", "alpha", "semantics", "kp2d", "visibility", "kp3d", "validity")

    @property
    def shape(self):
        return self.depth.shape


def project(points, camera):
    """Pinhole projection of camera-space points to normalized image coordinates.

    Returns ``(uv, in_front)``.  Points with ``z <= 0`` are flagged in
    ``in_front`` and their coordinates are clamped into ``[0, 1]``.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    f = camera.focal_length_px
    cx, cy = camera.principal_point
    u = (f * pts[..., 0] / zs + cx) / camera.width
    v = (f * pts[..., 1] / zs + cy) / camera.height
    uv = np.stack([u, v], axis=-1)
    uv = np.where(in_front[..., None], uv, np.clip(uv, 0.0, 1.0))
    return uv, in_front


def pixel_rays(camera, height, width, offsets=((0.0, 0.0),)):
    """Unit camera-space ray directions, shape len(offsets) x H x W x 3.

    Pixel ``(i, j)`` spans ``[j, j+1) x [i, i+1)`` in pixel units; an offset of
    zero samples its centre.
    """
    f = camera.focal_length_px
    cx, cy = camera.principal_point
    jj, ii = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    out = []
    for dx, dy in offsets:
        d = np.stack([(jj + dx - cx) / f, (ii + dy - cy) / f, np.ones_like(jj)], axis=-1)
        out.append(d / np.linalg.norm(d, axis=-1, keepdims=True))
    return np.stack(out)


def capsule_sdf(p, a, b, r):
    """Signed distance from points ``p`` (N x 3) to capsules (M), shape N x M."""
    pa = p[:, None, :] - a[None]
    ba = b - a
    bb = np.einsum("mi,mi->m", ba, ba)
    h = np.clip(np.einsum("nmi,mi->nm", pa, ba) / np.where(bb > 0, bb, 1.0), 0.0, 1.0)
    return np.linalg.norm(pa - h[..., None] * ba, axis=-1) - r


def capsule_normal(p, a, b):
    """Analytic SDF gradient of a single capsule at surface points (rows paired)."""
    ba = b - a
    bb = np.einsum("ni,ni->n", ba, ba)
    h = np.clip(np.einsum("ni,ni->n", p - a, ba) / np.where(bb > 0, bb, 1.0), 0.0, 1.0)
    n = p - (a + h[:, None] * ba)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _ray_sphere(dirs, center, radius):
    b = dirs @ center
    disc = b * b - (center @ center - radius * radius)
    root = np.sqrt(np.maximum(disc, 0.0))
    enter = np.where(disc > 0, b - root, np.inf)
    leave = np.where(disc > 0, b + root, -np.inf)
    return enter, leave


def sphere_trace(dirs, a, b, r, t_max):
    """March rays from the origin against the capsule union.

    Returns ``(t, capsule_index)``; misses get ``t = inf`` and index -1.
    Rays stop early when they pass ``t_max`` (e.g. the background plane).
    """
    n = len(dirs)
    t_hit = np.full(n, np.inf)
    idx = np.full(n, -1)
    if len(a) == 0 or n == 0:
        return t_hit, idx
    ends = np.concatenate([a, b])
    center = ends.mean(axis=0)
    radius = (np.linalg.norm(ends - center, axis=1) + np.concatenate([r, r])).max() + 1e-3
    enter, leave = _ray_sphere(dirs, center, radius)
    t = np.maximum(enter, 0.0)
    stop = np.minimum(leave, t_max)
    active = np.flatnonzero(t < stop)
    for _ in range(MAX_STEPS):
        if active.size == 0:
            break
        d = capsule_sdf(t[active, None] * dirs[active], a, b, r).min(axis=1)
        t[active] += d
        hit = d < TRACE_EPS
        t_hit[active[hit]] = t[active[hit]]
        active = active[~hit & (t[active] < stop[active])]
    # rays still marching after MAX_STEPS are grazing the silhouette; call them misses
    found = np.isfinite(t_hit)
    if found.any():
        pts = t_hit[found, None] * dirs[found]
        idx[found] = capsule_sdf(pts, a, b, r).argmin(axis=1)
    return t_hit, idx


def _plane_camera(scene, frame):
    """Ground plane as (unit normal facing the camera, offset) in camera space."""
    R, t = scene.camera.rotations[frame], scene.camera.translations[frame]
    n = R @ np.array([0.0, 1.0, 0.0])
    d = scene.background.plane_height + n @ t
    if d > 0:
        n, d = -n, -d
    return n, d


def _plane_hits(scene, frame, dirs):
    n, d = _plane_camera(scene, frame)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = d / denom
    s = np.where((denom < 0) & (s > 0), s, np.inf)
    ok = np.isfinite(s)
    cam = scene.camera
    world = (np.where(ok, s, 0.0)[:, None] * dirs - cam.translations[frame]) @ cam.rotations[frame]
    inside = np.abs(world[:, [0, 2]]).max(axis=1) <= scene.background.extent
    return np.where(ok & inside, s, np.inf)


def frame_capsules(scene, frame):
    """Camera-space capsule endpoints, radii, part ids and joints for one frame."""
    fig = scene.figure
    _, world = pose_figure(fig, scene.motion, frame)
    joints = scene.camera.to_camera(frame, world)
    bones = fig.bones()
    a = joints[[p for p, _ in bones]]
    b = joints[[j for _, j in bones]]
    r = fig.radii[[j for _, j in bones]]
    parts = np.array([fig.part_ids[j] for _, j in bones], dtype=np.int64)
    return a, b, r, parts, joints


def cast(scene, frame, dirs, caps=None):
    """Nearest hit along each ray: returns (t, kind, capsule) with kind 1=figure, 0=plane, -1=miss."""
    a, b, r, _, _ = caps if caps is not None else frame_capsules(scene, frame)
    if scene.background is not None:
        t_plane = _plane_hits(scene, frame, dirs)
    else:
        t_plane = np.full(len(dirs), np.inf)
    t_fig, cap = sphere_trace(dirs, a, b, r, t_plane)
    fig = t_fig < t_plane
    t = np.where(fig, t_fig, t_plane)
    kind = np.where(fig, 1, np.where(np.isfinite(t_plane), 0, -1))
    return t, kind, np.where(fig, cap, -1)


def render_clip(scene):
    """Render RGB and the full ground-truth bundle for a scene.

    Returns ``(rgb T x H x W x 3 float32, GroundTruthBundle)``.
    """
    T, H, W = scene.frames, scene.height, scene.width
    cam = scene.camera
    s = scene.supersample
    sub = [((k + 0.5) / s - 0.5, (l + 0.5) / s - 0.5) for l in range(s) for k in range(s)]
    centre_dirs = pixel_rays(cam, H, W)[0].reshape(-1, 3)
    sub_dirs = pixel_rays(cam, H, W, sub).reshape(-1, 3)
    K = scene.figure.num_joints
    joint_r = scene.figure.joint_radius()

    rgb = np.zeros((T, H * W, 3))
    depth = np.full((T, H * W), scene.far)
    normals = np.tile(np.array([0.0, 0.0, -1.0]), (T, H * W, 1))
    alpha = np.zeros((T, H * W))
    semantics = np.zeros((T, H * W, 3))
    validity = np.zeros((T, H * W))
    kp3d = np.zeros((T, K, 3))
    kp2d = np.zeros((T, K, 2))
    vis = np.zeros((T, K), dtype=np.uint8)

    for f in range(T):
        caps = frame_capsules(scene, f)
        a, b, r, parts, joints = caps
        t, kind, cap = cast(scene, f, centre_dirs, caps)
        hit = kind >= 0
        pts = np.where(hit, t, 0.0)[:, None] * centre_dirs
        figm = kind == 1
        plane = kind == 0
        validity[f] = hit
        depth[f, hit] = pts[hit, 2]

        light = cam.rotations[f] @ LIGHT_DIR
        if figm.any():
            c = cap[figm]
            normals[f, figm] = capsule_normal(pts[figm], a[c], b[c])
            p = parts[c]
            semantics[f, figm] = PALETTE[p]
            shade = _AMBIENT + (1 - _AMBIENT) * np.clip(normals[f, figm] @ light, 0, 1)
            rgb[f, figm] = scene.albedo[p] * shade[:, None]
        if plane.any():
            n, _ = _plane_camera(scene, f)
            normals[f, plane] = n
            world = (pts[plane] - cam.translations[f]) @ cam.rotations[f]
            bg = scene.background
            check = (np.floor(world[:, 0] / bg.checker_size)
                     + np.floor(world[:, 2] / bg.checker_size)) % 2
            col = np.where(check[:, None] > 0, bg.color_b, bg.color_a)
            rgb[f, plane] = col * (_AMBIENT + (1 - _AMBIENT) * max(n @ light, 0.0))
        miss = ~hit
        if miss.any():
            up = (centre_dirs[miss] @ cam.rotations[f])[:, 1]
            w = np.clip(0.5 + up, 0, 1)[:, None]
            if scene.background is not None:
                bg = scene.background
                rgb[f, miss] = (1 - w) * np.asarray(bg.sky_bottom) + w * np.asarray(bg.sky_top)

        _, ksub, _ = cast(scene, f, sub_dirs, caps)
        alpha[f] = (ksub.reshape(s * s, H * W) == 1).mean(axis=0)

        kp3d[f] = joints
        uv, front = project(joints, cam)
        col = np.floor(uv[:, 0] * W).astype(np.int64)
        row = np.floor(uv[:, 1] * H).astype(np.int64)
        inside = front & (col >= 0) & (col < W) & (row >= 0) & (row < H)
        for j in np.flatnonzero(inside):
            pix = row[j] * W + col[j]
            if hit[pix] and np.linalg.norm(pts[pix] - joints[j]) <= 2 * joint_r[j]:
                vis[f, j] = 1
        kp2d[f] = np.clip(uv, 0.0, 1.0)

    shape = (T, H, W)
    gt = GroundTruthBundle(
        depth=depth.reshape(shape).astype(np.float32),
        normals=normals.reshape(shape + (3,)).astype(np.float32),
        alpha=alpha.reshape(shape).astype(np.float32),
        semantics=semantics.reshape(shape + (3,)).astype(np.float32),
        kp2d=kp2d.astype(np.float32),
        visibility=vis,
        kp3d=kp3d.astype(np.float32),
        validity=validity.reshape(shape).astype(np.float32),
    )
    return np.clip(rgb, 0, 1).reshape(shape + (3,)).astype(np.float32), gt
