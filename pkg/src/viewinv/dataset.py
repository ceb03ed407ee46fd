"""Procedural multi-view video dataset.

Scenes are small collections of colored 3D blobs following per-class
parametric motions, rendered through a pinhole camera orbited about the
vertical axis at fixed azimuths (0/45/90 degrees). The cross-view protocol
pretrains and probe-trains on the 0-degree renders of the train scenes and
probe-tests on held-out scenes at all three azimuths.

Everything is a pure function of (seed, config): identical inputs produce
byte-identical datasets.
"""

from __future__ import annotations

import csv
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CLASS_NAMES = ("translate_x", "circle", "vertical_oscillate", "approach", "two_object_swap")
VIEWPOINTS = (0, 45, 90)
SPLIT_NAMES = ("pretrain", "probe_train", "cvs1", "cvs2", "cvs3")

_CAMERA_RADIUS = 4.0
_CAMERA_HEIGHT = 0.6
_FOCAL = 48.0
_BACKGROUND = 0.05

MAGIC = b"VCLP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHH2x")  # magic, version, T, H, W, C, padding


@dataclass
class DataConfig:
    root: str = "data"
    seed: int = 0
    num_classes: int = 5
    train_scenes_per_class: int = 100
    test_scenes_per_class: int = 30
    frames: int = 20
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if not (1 <= self.num_classes <= len(CLASS_NAMES)):
            raise ValueError(
                f"num_classes must be in [1, {len(CLASS_NAMES)}], got {self.num_classes}"
            )


@dataclass
class Blob:
    center: np.ndarray
    radius: float
    color: np.ndarray


@dataclass
class SceneSpec:
    class_id: int
    seed: int
    blobs: list[Blob]
    amplitude: float
    phase: float


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, H, W, C) float32 in [0, 1]
    class_id: int
    viewpoint_deg: int
    scene_id: int = -1
    split: str = ""


def generate_scene(class_id: int, seed: int, num_classes: int = 5) -> SceneSpec:
    """Deterministic scene: object placements and per-class motion jitter."""
    if not (0 <= class_id < num_classes):
        raise ValueError(f"class_id {class_id} out of range [0, {num_classes})")
    rng = np.random.default_rng([int(seed), int(class_id), 0xD5])
    n_obj = int(rng.integers(3, 6))
    blobs = []
    for i in range(n_obj):
        center = np.array(
            [rng.uniform(-0.9, 0.9), rng.uniform(-0.55, 0.55), rng.uniform(-0.9, 0.9)]
        )
        color = rng.uniform(0.25, 1.0, size=3)
        color[int(rng.integers(0, 3))] = 1.0  # keep blobs saturated and distinct
        blobs.append(Blob(center=center, radius=float(rng.uniform(0.16, 0.30)), color=color))
    if class_id == 4:
        # the swapping pair starts mirrored about the vertical axis
        gap = float(rng.uniform(0.5, 0.8))
        blobs[0].center[0] = -gap
        blobs[1].center[0] = gap
        blobs[1].center[1] = blobs[0].center[1]
    return SceneSpec(
        class_id=class_id,
        seed=int(seed),
        blobs=blobs,
        amplitude=float(rng.uniform(0.55, 0.85)),
        phase=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def object_positions(spec: SceneSpec, s: float) -> np.ndarray:
    """Blob centers at normalized time ``s`` in [0, 1]; blob 0 is the actor
    (blobs 0 and 1 for the swap class), the rest are static distractors."""
    pos = np.stack([b.center for b in spec.blobs]).astype(np.float64)
    a, phi = spec.amplitude, spec.phase
    if spec.class_id == 0:  # translate along world x
        pos[0, 0] += a * (2.0 * s - 1.0)
    elif spec.class_id == 1:  # horizontal circle in the xz plane
        pos[0, 0] += 0.6 * a * (np.cos(2 * np.pi * s + phi) - np.cos(phi))
        pos[0, 2] += 0.6 * a * (np.sin(2 * np.pi * s + phi) - np.sin(phi))
    elif spec.class_id == 2:  # vertical oscillation
        pos[0, 1] += 0.7 * a * np.sin(2 * np.pi * s + phi)
    elif spec.class_id == 3:  # approach along world z
        pos[0, 2] += a * (2.0 * s - 1.0)
    elif spec.class_id == 4:  # two objects exchange places along x
        blend = 3.0 * s * s - 2.0 * s**3
        x0, x1 = spec.blobs[0].center[0], spec.blobs[1].center[0]
        pos[0, 0] = x0 + (x1 - x0) * blend
        pos[1, 0] = x1 + (x0 - x1) * blend
    return pos


class Camera:
    """Pinhole camera orbited ``azimuth_deg`` about the vertical (y) axis."""

    def __init__(self, azimuth_deg: float, height: int = 32, width: int = 32):
        a = np.deg2rad(azimuth_deg)
        self.eye = np.array(
            [_CAMERA_RADIUS * np.sin(a), _CAMERA_HEIGHT, _CAMERA_RADIUS * np.cos(a)]
        )
        fwd = -self.eye / np.linalg.norm(self.eye)
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        up = np.cross(right, fwd)
        self.rot = np.stack([right, up, fwd])  # world -> camera rows
        self.cx = (width - 1) / 2.0
        self.cy = (height - 1) / 2.0

    def to_camera(self, point: np.ndarray) -> np.ndarray:
        return self.rot @ (np.asarray(point, dtype=np.float64) - self.eye)

    def project(self, point: np.ndarray) -> tuple[float, float, float]:
        """World point -> (col, row, depth) in pixel coordinates."""
        x, y, z = self.to_camera(point)
        u = _FOCAL * x / z + self.cx
        v = -_FOCAL * y / z + self.cy
        return float(u), float(v), float(z)


def render_view(
    spec: SceneSpec,
    viewpoint_deg: int,
    frames: int = 20,
    height: int = 32,
    width: int = 32,
) -> VideoClip:
    """Painter's-algorithm render of the animated scene from one azimuth."""
    if viewpoint_deg not in VIEWPOINTS:
        raise ValueError(f"unsupported viewpoint {viewpoint_deg}, expected one of {VIEWPOINTS}")
    cam = Camera(viewpoint_deg, height=height, width=width)
    rows = np.arange(height, dtype=np.float64)[:, None]
    cols = np.arange(width, dtype=np.float64)[None, :]
    out = np.full((frames, height, width, 3), _BACKGROUND, dtype=np.float64)
    for f in range(frames):
        s = f / (frames - 1) if frames > 1 else 0.0
        pos = object_positions(spec, s)
        projected = []
        for b, p in zip(spec.blobs, pos):
            u, v, z = cam.project(p)
            if z <= 0.2:
                continue
            projected.append((z, u, v, _FOCAL * b.radius / z, b.color))
        projected.sort(key=lambda item: -item[0])  # far to near
        frame = out[f]
        for z, u, v, rho, color in projected:
            dist = np.sqrt((cols - u) ** 2 + (rows - v) ** 2)
            cover = np.clip(rho + 0.5 - dist, 0.0, 1.0)[..., None]
            frame *= 1.0 - cover
            frame += cover * color[None, None, :]
    return VideoClip(
        frames=np.clip(out, 0.0, 1.0).astype(np.float32),
        class_id=spec.class_id,
        viewpoint_deg=viewpoint_deg,
    )


# ---------------------------------------------------------------------------
# on-disk format


def write_clip(path, clip: VideoClip) -> None:
    t, h, w, c = clip.frames.shape
    data = np.ascontiguousarray(clip.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, t, h, w, c))
        fh.write(data.tobytes())


def read_clip(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        magic, version, t, h, w, c = _HEADER.unpack(header)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a vclip file")
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported vclip version {version}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != t * h * w * c:
        raise ValueError(f"{path}: truncated clip payload")
    return data.reshape(t, h, w, c).copy()


MANIFEST_COLUMNS = ("clip_path", "class_id", "viewpoint_deg", "scene_id", "split")


def write_manifest(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_COLUMNS})


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_COLUMNS:
            raise ValueError(f"{path}: unexpected manifest columns {reader.fieldnames}")
        rows = []
        for row in reader:
            rows.append(
                {
                    "clip_path": row["clip_path"],
                    "class_id": int(row["class_id"]),
                    "viewpoint_deg": int(row["viewpoint_deg"]),
                    "scene_id": int(row["scene_id"]),
                    "split": row["split"],
                }
            )
    return rows


def load_split(root, split: str) -> tuple[list[dict], list[np.ndarray]]:
    """Manifest rows plus their decoded frame arrays."""
    root = Path(root)
    rows = read_manifest(root / split / "manifest.csv")
    clips = [read_clip(root / split / row["clip_path"]) for row in rows]
    return rows, clips


# ---------------------------------------------------------------------------
# protocol


def _scene_seed(config: DataConfig, class_id: int, index: int, held_out: bool) -> int:
    ss = np.random.SeedSequence([config.seed, class_id, index, int(held_out), 0xA11CE])
    return int(ss.generate_state(1)[0])


def build_protocol(config: DataConfig) -> dict[str, list[dict]]:
    """Render the full dataset tree under ``config.root``.

    Splits: ``pretrain`` and ``probe_train`` are the 0-degree renders of the
    train scenes (identical content; the probe split re-uses the rendered
    bytes), ``cvs1/2/3`` are the 0/45/90-degree renders of the held-out test
    scenes. Scene ids are disjoint between train and test by construction.
    """
    root = Path(config.root)
    manifests: dict[str, list[dict]] = {name: [] for name in SPLIT_NAMES}
    for name in SPLIT_NAMES:
        (root / name).mkdir(parents=True, exist_ok=True)

    render_kw = dict(frames=config.frames, height=config.height, width=config.width)

    for class_id in range(config.num_classes):
        for index in range(config.train_scenes_per_class):
            scene_id = class_id * 1000 + index
            spec = generate_scene(class_id, _scene_seed(config, class_id, index, False), config.num_classes)
            clip = render_view(spec, 0, **render_kw)
            clip.scene_id, clip.split = scene_id, "pretrain"
            fname = f"{scene_id}_{0}.vclip"
            write_clip(root / "pretrain" / fname, clip)
            shutil.copyfile(root / "pretrain" / fname, root / "probe_train" / fname)
            row = {
                "clip_path": fname,
                "class_id": class_id,
                "viewpoint_deg": 0,
                "scene_id": scene_id,
            }
            manifests["pretrain"].append({**row, "split": "pretrain"})
            manifests["probe_train"].append({**row, "split": "probe_train"})

        for index in range(config.test_scenes_per_class):
            scene_id = 100_000 + class_id * 1000 + index
            spec = generate_scene(class_id, _scene_seed(config, class_id, index, True), config.num_classes)
            for split, viewpoint in (("cvs1", 0), ("cvs2", 45), ("cvs3", 90)):
                clip = render_view(spec, viewpoint, **render_kw)
                clip.scene_id, clip.split = scene_id, split
                fname = f"{scene_id}_{viewpoint}.vclip"
                write_clip(root / split / fname, clip)
                manifests[split].append(
                    {
                        "clip_path": fname,
                        "class_id": class_id,
                        "viewpoint_deg": viewpoint,
                        "scene_id": scene_id,
                        "split": split,
                    }
                )

    train_ids = {r["scene_id"] for r in manifests["pretrain"]}
    test_ids = {r["scene_id"] for r in manifests["cvs1"]}
    if train_ids & test_ids:
        raise ValueError(f"overlapping scene ids between train and test: {train_ids & test_ids}")

    for name in SPLIT_NAMES:
        write_manifest(root / name / "manifest.csv", manifests[name])
    return manifests
