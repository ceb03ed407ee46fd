"""Stochastic clip augmentations (the three view transforms T, T', T'').

All spatial decisions are drawn once per clip and applied to every frame
(clip-wise consistency). Given the same seed and profile the output is
identical; a fully disabled profile returns the input bytes unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .dataset import VideoClip


@dataclass(frozen=True)
class AugmentProfile:
    out_frames: int | None = 16
    crop_min: float = 0.6
    crop_max: float = 1.0
    flip_p: float = 0.5
    blur_p: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 1.0)
    jitter: float = 0.3

    @classmethod
    def identity(cls) -> "AugmentProfile":
        return cls(out_frames=None, crop_min=1.0, crop_max=1.0, flip_p=0.0, blur_p=0.0, jitter=0.0)


def resize_bilinear(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resize of a (T, H, W, C) array."""
    t, h, w, c = frames.shape
    if (h, w) == (out_h, out_w):
        return frames
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[None, :, None, None]
    fx = (xs - x0)[None, None, :, None]
    top = frames[:, y0][:, :, x0] * (1 - fx) + frames[:, y0][:, :, x1] * fx
    bot = frames[:, y1][:, :, x0] * (1 - fx) + frames[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(frames.dtype)


def augment_frames(frames: np.ndarray, seed: int, profile: AugmentProfile) -> np.ndarray:
    """Apply the profile's transform family to a (T, H, W, C) array."""
    rng = np.random.default_rng(seed)
    t, h, w, _ = frames.shape

    t_out = profile.out_frames or t
    if t_out > t:
        raise ValueError(f"temporal crop to {t_out} frames exceeds clip length {t}")
    t_start = int(rng.integers(0, t - t_out + 1))

    frac = float(rng.uniform(profile.crop_min, profile.crop_max))
    side_h = max(1, int(round(frac * h)))
    side_w = max(1, int(round(frac * w)))
    top = int(rng.integers(0, h - side_h + 1))
    left = int(rng.integers(0, w - side_w + 1))
    do_flip = bool(rng.uniform() < profile.flip_p)
    do_blur = bool(rng.uniform() < profile.blur_p)
    sigma = float(rng.uniform(*profile.blur_sigma))
    j = profile.jitter
    brightness = 1.0 + float(rng.uniform(-j, j))
    contrast = 1.0 + float(rng.uniform(-j, j))
    saturation = 1.0 + float(rng.uniform(-j, j))

    no_op = (
        t_out == t
        and (side_h, side_w) == (h, w)
        and not do_flip
        and not do_blur
        and brightness == 1.0
        and contrast == 1.0
        and saturation == 1.0
    )
    if no_op:
        return frames.copy()

    out = frames[t_start : t_start + t_out, top : top + side_h, left : left + side_w]
    out = resize_bilinear(np.ascontiguousarray(out), h, w)
    if do_flip:
        out = out[:, :, ::-1, :]
    if do_blur:
        out = ndimage.gaussian_filter(out, sigma=(0.0, sigma, sigma, 0.0), mode="nearest")
    out = out.astype(np.float32, copy=True)
    if brightness != 1.0:
        out *= brightness
    if contrast != 1.0:
        mean = out.mean()
        out = mean + (out - mean) * contrast
    if saturation != 1.0:
        gray = out.mean(axis=-1, keepdims=True)
        out = gray + (out - gray) * saturation
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def augment(clip: VideoClip, seed: int, profile: AugmentProfile) -> VideoClip:
    """Augment a clip; class/viewpoint/scene metadata passes through."""
    return replace(clip, frames=augment_frames(clip.frames, seed, profile))


def center_window(frames: np.ndarray, out_frames: int) -> np.ndarray:
    """Deterministic centered temporal crop (evaluation-time view)."""
    t = frames.shape[0]
    if t <= out_frames:
        return frames
    start = (t - out_frames) // 2
    return frames[start : start + out_frames]
