"""On-disk dataset layout: ``<root>/manifest.json`` plus one ``clip_<seed>/`` per clip.

Each clip directory holds one ``.npy`` container per modality.  Arrays are
little-endian float32 except the keypoint visibility bits (uint8).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .render import GroundTruthBundle, render_clip
from .scene import JOINT_NAMES, PALETTE, PART_NAMES, GenConfig, sample_scene

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_FILES = {
    "rgb": "rgb.npy", "depth": "depth.npy", "normals": "normal.npy", "alpha": "alpha.npy",
    "semantics": "semantics.npy", "kp2d": "kp2d.npy", "visibility": "kp2d_visibility.npy",
    "kp3d": "kp3d.npy", "validity": "validity.npy",
}


class IntegrityError(RuntimeError):
    """Stored arrays disagree with the manifest."""


@dataclass
class Clip:
    seed: int
    rgb: np.ndarray
    gt: GroundTruthBundle
    focal_px: float
    principal_point: tuple[float, float]


def clip_dirname(seed):
    return f"clip_{seed}"


def expected_shapes(T, H, W, K):
    return {
        "rgb": (T, H, W, 3), "depth": (T, H, W), "normals": (T, H, W, 3), "alpha": (T, H, W),
        "semantics": (T, H, W, 3), "kp2d": (T, K, 2), "visibility": (T, K),
        "kp3d": (T, K, 3), "validity": (T, H, W),
    }


def write_clip(rgb, gt, directory, seed, camera=None):
    """Store one clip's arrays under ``directory``; returns its manifest entry."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {"rgb": rgb, **{k: getattr(gt, k) for k in GroundTruthBundle.MODALITIES}}
    for name, arr in arrays.items():
        dtype = "<u1" if name == "visibility" else "<f4"
        np.save(d / _FILES[name], np.ascontiguousarray(arr, dtype=dtype), allow_pickle=False)
    entry = {"seed": int(seed), "dir": d.name,
             "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    if camera is not None:
        entry["focal_px"] = float(camera.focal_length_px)
        entry["principal_point"] = [float(x) for x in camera.principal_point]
    return entry


def load_manifest(root):
    path = Path(root) / MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"no manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"manifest format {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest


def read_clip(directory, manifest=None):
    """Load a clip directory, checking every array against the dataset manifest."""
    d = Path(directory)
    manifest = manifest or load_manifest(d.parent)
    entry = next((e for e in manifest["clips"] if e["dir"] == d.name), None)
    if entry is None:
        raise IntegrityError(f"{d.name} is not listed in the manifest")
    want = expected_shapes(manifest["T"], manifest["H"], manifest["W"], manifest["K"])
    arrays = {}
    for name, fname in _FILES.items():
        arr = np.load(d / fname, allow_pickle=False)
        if tuple(arr.shape) != want[name] or list(arr.shape) != entry["shapes"][name]:
            raise IntegrityError(
                f"{d.name}/{fname}: shape {tuple(arr.shape)} does not match manifest {want[name]}")
        if arr.dtype != (np.uint8 if name == "visibility" else np.dtype("<f4")):
            raise IntegrityError(f"{d.name}/{fname}: unexpected dtype {arr.dtype}")
        arrays[name] = arr
    rgb = arrays.pop("rgb")
    clip = Clip(seed=entry["seed"], rgb=rgb, gt=GroundTruthBundle(**arrays),
                focal_px=entry.get("focal_px", float("nan")),
                principal_point=tuple(entry.get("principal_point", (np.nan, np.nan))))
    return clip


def write_manifest(root, config, entries):
    K = config.joints
    manifest = {
        "format_version": FORMAT_VERSION,
        "T": config.frames, "H": config.height, "W": config.width, "K": K,
        "P": len(PART_NAMES),
        "fps": config.fps,
        "palette": PALETTE.tolist(),
        "part_names": list(PART_NAMES),
        "joint_names": list(JOINT_NAMES[:K]),
        "parents": list(sample_scene(0, config).figure.parents),
        "far": config.far,
        "seeds": [e["seed"] for e in entries],
        "clips": entries,
        "config": _jsonable(config.__dict__),
    }
    path = Path(root) / MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _jsonable(d):
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def generate_dataset(root, seeds, config=None, force=False):
    """Render and store clips for ``seeds``; existing clip directories are reused unless ``force``."""
    config = (config or GenConfig()).validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for seed in seeds:
        d = root / clip_dirname(seed)
        scene = sample_scene(seed, config)
        if d.exists() and not force and all((d / f).exists() for f in _FILES.values()):
            shapes = expected_shapes(config.frames, config.height, config.width, config.joints)
            entries.append({"seed": int(seed), "dir": d.name,
                            "shapes": {k: list(v) for k, v in shapes.items()},
                            "focal_px": float(scene.camera.focal_length_px),
                            "principal_point": [float(x) for x in scene.camera.principal_point]})
            continue
        rgb, gt = render_clip(scene)
        entries.append(write_clip(rgb, gt, d, seed, scene.camera))
    return write_manifest(root, config, entries)


class ClipDataset:
    """All clips of a dataset directory, loaded eagerly in manifest order."""

    def __init__(self, root):
        self.root = Path(root)
        self.manifest = load_manifest(self.root)
        self.clips = [read_clip(self.root / e["dir"], self.manifest) for e in self.manifest["clips"]]

    def __len__(self):
        return len(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    def __iter__(self):
        return iter(self.clips)

    @property
    def palette(self):
        return np.asarray(self.manifest["palette"], dtype=np.float32)

    @property
    def fps(self):
        return self.manifest["fps"]

    @classmethod
    def from_clips(cls, clips, manifest):
        self = cls.__new__(cls)
        self.root = None
        self.manifest = manifest
        self.clips = list(clips)
        return self
