"""Joint geometric + photometric augmentation of RGB-D samples.

One inverse affine map (output pixel -> source pixel) is drawn per call and
used for every modality: bilinear sampling for RGB and depth/HHA, nearest
for labels. Photometric jitter and noise touch RGB only. Depth values are
never rescaled: geometric scaling changes sampling, not metric distances.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..ops import IGNORE_INDEX
from .sample import RgbdSample


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentPolicy:
    flip_prob: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)
    rotation_deg: float = 0.0
    crop_size: tuple[int, int] | None = None
    brightness: float = 0.0
    contrast: float = 0.0
    noise_std: float = 0.0

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls()


@dataclass(frozen=True)
class Transform:
    """Drawn transform; ``matrix`` maps output (x, y, 1) to source (x, y)."""

    flip: bool
    scale: float
    angle_deg: float
    offset: tuple[int, int]
    out_size: tuple[int, int]
    in_size: tuple[int, int]

    @property
    def matrix(self) -> np.ndarray:
        h, w = self.in_size
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        oy, ox = self.offset
        th = np.deg2rad(self.angle_deg)
        c, s = np.cos(th), np.sin(th)
        # output crop -> transformed frame (translate by offset), then undo
        # rotation/scale about the centre, then undo the flip.
        to_frame = np.array([[1, 0, ox], [0, 1, oy], [0, 0, 1]], dtype=np.float64)
        centre = np.array([[1, 0, -cx], [0, 1, -cy], [0, 0, 1]], dtype=np.float64)
        uncentre = np.array([[1, 0, cx], [0, 1, cy], [0, 0, 1]], dtype=np.float64)
        inv_rs = np.array([[c, s, 0], [-s, c, 0], [0, 0, self.scale]], dtype=np.float64) / self.scale
        inv_rs[2] = [0, 0, 1]
        flip = np.array([[-1, 0, w - 1], [0, 1, 0], [0, 0, 1]], dtype=np.float64) if self.flip else np.eye(3)
        return (flip @ uncentre @ inv_rs @ centre @ to_frame)[:2]

    def grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Source (x, y) coordinates for every output pixel."""
        oh, ow = self.out_size
        yy, xx = np.mgrid[0:oh, 0:ow].astype(np.float64)
        m = self.matrix
        sx = m[0, 0] * xx + m[0, 1] * yy + m[0, 2]
        sy = m[1, 0] * xx + m[1, 1] * yy + m[1, 2]
        return sx, sy


def draw_transform(policy: AugmentPolicy, h: int, w: int, rng: np.random.Generator) -> Transform:
    ch, cw = policy.crop_size or (h, w)
    if ch > h or cw > w:
        raise AugmentError(f"crop {(ch, cw)} larger than image {(h, w)}")
    flip = bool(rng.random() < policy.flip_prob) if policy.flip_prob > 0 else False
    lo, hi = policy.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    if scale <= 0:
        raise AugmentError("scale must be positive")
    angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg)) if policy.rotation_deg else 0.0
    oy = int(rng.integers(0, h - ch + 1)) if ch < h else 0
    ox = int(rng.integers(0, w - cw + 1)) if cw < w else 0
    return Transform(flip, scale, angle, (oy, ox), (ch, cw), (h, w))


def sample_bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample the last two axes of ``img`` at (sx, sy); outside the frame gives ``fill``."""
    h, w = img.shape[-2:]
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    x = np.clip(sx, 0, w - 1)
    y = np.clip(sy, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = x - x0
    ty = y - y0
    a = img[..., y0, x0]
    b = img[..., y0, x1]
    c = img[..., y1, x0]
    d = img[..., y1, x1]
    top = a + tx * (b - a)
    bot = c + tx * (d - c)
    out = top + ty * (bot - top)
    return np.where(inside, out, fill)


def sample_nearest(img: np.ndarray, sx: np.ndarray, sy: np.ndarray, fill) -> np.ndarray:
    h, w = img.shape[-2:]
    xi = np.floor(sx + 0.5).astype(np.intp)
    yi = np.floor(sy + 0.5).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = img[..., np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(inside, out, fill)


def augment_arrays(rgb: np.ndarray, depth: np.ndarray, label: np.ndarray, policy: AugmentPolicy,
                   rng: np.random.Generator, transform: Transform | None = None):
    """Augment channel-last uint8 RGB, depth (H x W or C x H x W) and labels.

    Returns ``(rgb, depth, label, transform)``.
    """
    h, w = label.shape
    if rgb.shape[:2] != (h, w) or depth.shape[-2:] != (h, w):
        raise AugmentError(f"extent mismatch: rgb {rgb.shape[:2]}, depth {depth.shape[-2:]}, label {(h, w)}")
    tf = transform or draw_transform(policy, h, w, rng)
    sx, sy = tf.grid()

    rgb_f = np.moveaxis(rgb.astype(np.float64), -1, 0)
    rgb_f = sample_bilinear(rgb_f, sx, sy)
    if policy.brightness or policy.contrast:
        b = 1.0 + rng.uniform(-policy.brightness, policy.brightness) if policy.brightness else 1.0
        c = 1.0 + rng.uniform(-policy.contrast, policy.contrast) if policy.contrast else 1.0
        mean = rgb_f.mean()
        rgb_f = (rgb_f - mean) * c + mean * b
    if policy.noise_std:
        rgb_f = rgb_f + rng.normal(0.0, policy.noise_std, size=rgb_f.shape)
    rgb_out = np.clip(np.rint(rgb_f), 0, 255).astype(np.uint8)
    rgb_out = np.moveaxis(rgb_out, 0, -1)

    depth_out = sample_bilinear(np.asarray(depth, dtype=np.float64), sx, sy)
    label_out = sample_nearest(label, sx, sy, IGNORE_INDEX).astype(label.dtype)
    return rgb_out, depth_out, label_out, tf


def augment(sample: RgbdSample, policy: AugmentPolicy, rng: np.random.Generator) -> RgbdSample:
    rgb, depth, label, _ = augment_arrays(sample.rgb, sample.depth, sample.label, policy, rng)
    return replace(sample, rgb=rgb, depth=depth, label=label)
