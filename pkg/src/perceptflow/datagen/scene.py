"""Procedural scenes: skeleton, motion, camera orbit and background.

Everything here is a pure function of ``(seed, GenConfig)``.  World frame is
y-up with the ground plane at ``y = 0``; camera frame is x-right, y-down,
z-forward so that depth is the positive z coordinate.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np
from scipy.spatial.transform import Rotation

JOINT_NAMES = (
    "pelvis", "spine", "chest", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
# parents-first ordering, so any prefix of the table is still a rooted tree
PARENTS = (-1, 0, 1, 2, 2, 4, 5, 2, 7, 8, 0, 10, 11, 0, 13, 14)
REST_OFFSETS = np.array([
    [0.0, 0.0, 0.0],
    [0.0, 0.20, 0.0],
    [0.0, 0.22, 0.0],
    [0.0, 0.30, 0.0],
    [0.20, 0.04, 0.0],
    [0.04, -0.27, 0.0],
    [0.02, -0.25, 0.0],
    [-0.20, 0.04, 0.0],
    [-0.04, -0.27, 0.0],
    [-0.02, -0.25, 0.0],
    [0.10, -0.05, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.40, 0.0],
    [-0.10, -0.05, 0.0],
    [0.0, -0.42, 0.0],
    [0.0, -0.40, 0.0],
])
# capsule radius of the bone ending at each joint (entry 0 unused)
BONE_RADII = np.array([0.0, 0.13, 0.13, 0.11, 0.07, 0.065, 0.055, 0.07, 0.065, 0.055,
                       0.09, 0.085, 0.065, 0.09, 0.085, 0.065])
PART_NAMES = ("torso", "head", "l_upper_arm", "l_lower_arm", "r_upper_arm",
              "r_lower_arm", "l_upper_leg", "l_lower_leg", "r_upper_leg", "r_lower_leg")
BONE_PARTS = (0, 0, 0, 1, 0, 2, 3, 0, 4, 5, 0, 6, 7, 0, 8, 9)
PALETTE = np.array([
    [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 0.5, 0.0],
    [0.0, 0.5, 1.0], [0.5, 0.0, 1.0],
], dtype=np.float32)

# (mean, amplitude) per Euler axis, radians; leaf joints carry no children so stay at rest
_ANGLE_LIMITS = {
    "spine": ((0.0, 0.15), (0.0, 0.2), (0.0, 0.1)),
    "chest": ((0.0, 0.1), (0.0, 0.15), (0.0, 0.1)),
    "head": ((0.0, 0.1), (0.0, 0.2), (0.0, 0.1)),
    "l_shoulder": ((0.0, 0.8), (0.0, 0.3), (0.15, 0.35)),
    "r_shoulder": ((0.0, 0.8), (0.0, 0.3), (-0.15, 0.35)),
    "l_elbow": ((-0.6, 0.6), (0.0, 0.0), (0.0, 0.0)),
    "r_elbow": ((-0.6, 0.6), (0.0, 0.0), (0.0, 0.0)),
    "l_hip": ((0.0, 0.6), (0.0, 0.15), (0.05, 0.15)),
    "r_hip": ((0.0, 0.6), (0.0, 0.15), (-0.05, 0.15)),
    "l_knee": ((0.6, 0.6), (0.0, 0.0), (0.0, 0.0)),
    "r_knee": ((0.6, 0.6), (0.0, 0.0), (0.0, 0.0)),
}


class ConfigError(ValueError):
    """Invalid generation or run configuration."""


@dataclass(frozen=True)
class GenConfig:
    frames: int = 17
    height: int = 64
    width: int = 64
    joints: int = 16
    fps: float = 24.0
    limb_scale: tuple[float, float] = (0.92, 1.08)
    radius_scale: tuple[float, float] = (0.9, 1.15)
    orbit_center: tuple[float, float, float] = (0.0, 0.85, 0.0)
    orbit_radius: tuple[float, float] = (2.4, 2.7)
    orbit_elevation_deg: tuple[float, float] = (2.0, 15.0)
    orbit_sweep_deg: tuple[float, float] = (-40.0, 40.0)
    focal_px: tuple[float, float] = (80.0, 90.0)
    motion_freq_hz: tuple[float, float] = (0.5, 2.0)
    harmonics: int = 2
    background: bool = True
    far: float = 100.0
    supersample: int = 2

    def validate(self):
        if self.frames < 2:
            raise ConfigError(f"frames must be >= 2, got {self.frames}")
        if not 2 <= self.joints <= len(JOINT_NAMES):
            raise ConfigError(f"joints must be in [2, {len(JOINT_NAMES)}], got {self.joints}")
        if self.height <= 0 or self.width <= 0:
            raise ConfigError("height and width must be positive")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple) and len(v) == 2 and v[0] > v[1]:
                raise ConfigError(f"range {f.name} has low > high: {v}")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown datagen keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class ArticulatedFigure:
    parents: tuple[int, ...]
    rest_offsets: np.ndarray     # K x 3, meters, in parent frame
    radii: np.ndarray            # K, radius of bone (parent -> j); entry of the root unused
    part_ids: tuple[int, ...]    # K, part of bone (parent -> j)
    num_parts: int = len(PART_NAMES)

    def __post_init__(self):
        parents = self.parents
        if sum(p < 0 for p in parents) != 1 or parents[0] != -1:
            raise ValueError("skeleton must have exactly one root at index 0")
        for j, p in enumerate(parents[1:], start=1):
            if not 0 <= p < j:
                raise ValueError(f"joint {j} has parent {p}; parents must precede children")
        if np.any(self.radii[1:] <= 0):
            raise ValueError("all capsule radii must be positive")

    @property
    def num_joints(self):
        return len(self.parents)

    def bones(self):
        """(parent, child) pairs, one capsule each."""
        return [(p, j) for j, p in enumerate(self.parents) if p >= 0]

    def joint_radius(self):
        """Largest radius among capsules touching each joint."""
        r = np.zeros(self.num_joints)
        for p, j in self.bones():
            r[j] = max(r[j], self.radii[j])
            r[p] = max(r[p], self.radii[j])
        return r


@dataclass(frozen=True)
class CameraModel:
    focal_length_px: float
    principal_point: np.ndarray  # (cx, cy) in pixels
    rotations: np.ndarray        # T x 3 x 3, world -> camera
    translations: np.ndarray     # T x 3
    width: int
    height: int

    def __post_init__(self):
        if not self.focal_length_px > 0:
            raise ValueError("focal length must be positive")
        R = self.rotations
        eye = np.broadcast_to(np.eye(3), R.shape)
        if np.abs(R @ np.swapaxes(R, -1, -2) - eye).max() > 1e-6 or \
                np.abs(np.linalg.det(R) - 1).max() > 1e-6:
            raise ValueError("camera rotations must be proper orthonormal")

    def positions(self):
        """Camera centers in world coordinates, T x 3."""
        return -np.einsum("tji,tj->ti", self.rotations, self.translations)

    def to_camera(self, frame, pts):
        return pts @ self.rotations[frame].T + self.translations[frame]


@dataclass(frozen=True)
class Motion:
    euler: np.ndarray             # T x K x 3 local joint rotations ('xyz', radians)
    root_translation: np.ndarray  # T x 3 world position of the root

    @property
    def frames(self):
        return self.euler.shape[0]


@dataclass(frozen=True)
class Background:
    plane_height: float = 0.0
    extent: float = 6.0           # half-size of the square ground patch
    checker_size: float = 0.5
    color_a: tuple[float, float, float] = (0.55, 0.55, 0.5)
    color_b: tuple[float, float, float] = (0.35, 0.38, 0.4)
    sky_top: tuple[float, float, float] = (0.45, 0.6, 0.85)
    sky_bottom: tuple[float, float, float] = (0.8, 0.85, 0.9)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    figure: ArticulatedFigure
    motion: Motion
    camera: CameraModel
    background: Background | None
    albedo: np.ndarray            # P x 3 surface color per part
    frames: int
    height: int
    width: int
    fps: float = 24.0
    far: float = 100.0
    supersample: int = 2
    orbit_center: np.ndarray = field(default_factory=lambda: np.zeros(3))


def canonical_figure(joints=16, limb_scale=1.0, radius_scale=1.0):
    return ArticulatedFigure(
        parents=PARENTS[:joints],
        rest_offsets=REST_OFFSETS[:joints] * limb_scale,
        radii=BONE_RADII[:joints] * radius_scale,
        part_ids=BONE_PARTS[:joints],
    )


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World->camera (R, t) for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return R, -R @ eye


def orbit_positions(center, radius, elevation, azimuths):
    """Points on a sphere of ``radius`` about ``center``; angles in radians."""
    c = np.asarray(center, dtype=np.float64)
    az = np.asarray(azimuths, dtype=np.float64)
    ce = np.cos(elevation)
    return c + radius * np.stack(
        [ce * np.sin(az), np.full_like(az, np.sin(elevation)), ce * np.cos(az)], axis=-1)


def _sinusoids(rng, frames, fps, n, harmonics, freq_range):
    """``n`` band-limited signals in [-1, 1], shape frames x n."""
    t = np.arange(frames) / fps
    freqs = rng.uniform(*freq_range, size=(n, harmonics))
    phases = rng.uniform(0, 2 * np.pi, size=(n, harmonics))
    weights = rng.dirichlet(np.ones(harmonics), size=n)
    return np.einsum("nh,tnh->tn", weights,
                     np.sin(2 * np.pi * freqs[None] * t[:, None, None] + phases[None]))


def sample_scene(seed, config=None):
    """Draw a scene from ``config``; identical inputs give bit-identical scenes."""
    cfg = (config or GenConfig()).validate()
    rng = np.random.default_rng(seed)
    T, K = cfg.frames, cfg.joints

    figure = canonical_figure(K, rng.uniform(*cfg.limb_scale), rng.uniform(*cfg.radius_scale))

    signals = _sinusoids(rng, T, cfg.fps, K * 3, cfg.harmonics, cfg.motion_freq_hz).reshape(T, K, 3)
    mean = np.zeros((K, 3))
    amp = np.zeros((K, 3))
    for j, name in enumerate(JOINT_NAMES[:K]):
        if name in _ANGLE_LIMITS:
            lim = np.asarray(_ANGLE_LIMITS[name])
            mean[j], amp[j] = lim[:, 0], lim[:, 1]
    euler = mean + amp * signals
    yaw0 = rng.uniform(-np.pi, np.pi)
    yaw_rate = rng.uniform(-0.6, 0.6)
    euler[:, 0, :] = 0.0
    euler[:, 0, 1] = yaw0 + yaw_rate * np.linspace(0, 1, T)
    if K > 12:
        hip_height = figure.radii[12] - figure.rest_offsets[10:13, 1].sum()
    else:
        hip_height = 0.9
    base = np.array([0.0, hip_height, 0.0])
    sway = 0.06 * _sinusoids(rng, T, cfg.fps, 3, cfg.harmonics, cfg.motion_freq_hz)
    motion = Motion(euler=euler, root_translation=base + sway)

    radius = rng.uniform(*cfg.orbit_radius)
    elevation = np.deg2rad(rng.uniform(*cfg.orbit_elevation_deg))
    az0 = rng.uniform(-np.pi, np.pi)
    sweep = np.deg2rad(rng.uniform(*cfg.orbit_sweep_deg))
    azimuths = az0 + sweep * np.linspace(0, 1, T)
    center = np.asarray(cfg.orbit_center, dtype=np.float64)
    eyes = orbit_positions(center, radius, elevation, azimuths)
    Rs, ts = zip(*(look_at(e, center) for e in eyes))
    camera = CameraModel(
        focal_length_px=float(rng.uniform(*cfg.focal_px)),
        principal_point=np.array([cfg.width / 2, cfg.height / 2]),
        rotations=np.stack(Rs), translations=np.stack(ts),
        width=cfg.width, height=cfg.height,
    )

    background = None
    if cfg.background:
        c = rng.uniform(0.25, 0.75, size=(2, 3))
        background = Background(checker_size=float(rng.uniform(0.5, 1.0)),
                                color_a=tuple(c[0]), color_b=tuple(c[1]))
    # skin / shirt / trousers
    group = rng.uniform(0.2, 0.95, size=(3, 3))
    albedo = group[[1, 0, 1, 0, 1, 0, 2, 2, 2, 2]]

    return SceneSpec(seed=seed, figure=figure, motion=motion, camera=camera,
                     background=background, albedo=albedo, frames=T,
                     height=cfg.height, width=cfg.width, fps=cfg.fps, far=cfg.far,
                     supersample=cfg.supersample, orbit_center=center)


def pose_figure(figure, motion, frame):
    """Forward kinematics for one frame.

    Returns ``(rotations K x 3 x 3, positions K x 3)`` in world coordinates.
    Each joint's world transform is its parent's composed with its local
    transform (rest offset, then local rotation); the root carries the
    motion's root translation.
    """
    if not 0 <= frame < motion.frames:
        raise IndexError(f"frame {frame} outside [0, {motion.frames})")
    K = figure.num_joints
    local = Rotation.from_euler("xyz", motion.euler[frame, :K]).as_matrix()
    rot = np.zeros((K, 3, 3))
    pos = np.zeros((K, 3))
    for j, p in enumerate(figure.parents):
        if p < 0:
            rot[j] = local[j]
            pos[j] = motion.root_translation[frame] + figure.rest_offsets[j]
        else:
            rot[j] = rot[p] @ local[j]
            pos[j] = pos[p] + rot[p] @ figure.rest_offsets[j]
    return rot, pos


def scenes_equal(a, b):
    """Exact structural equality, arrays compared bit-for-bit."""
    def eq(x, y):
        if isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            x, y = np.asarray(x), np.asarray(y)
            return x.shape == y.shape and x.dtype == y.dtype and x.tobytes() == y.tobytes()
        if hasattr(x, "__dataclass_fields__"):
            return type(x) is type(y) and all(
                eq(getattr(x, f.name), getattr(y, f.name)) for f in fields(x))
        return x == y
    return eq(a, b)
