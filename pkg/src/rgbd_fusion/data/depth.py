"""Depth preprocessing: hole filling, HHA encoding, and resolution shrinking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..ops import resize_array

_DIAMOND5 = np.array([[0, 0, 1, 0, 0],
                      [0, 1, 1, 1, 0],
                      [1, 1, 1, 1, 1],
                      [0, 1, 1, 1, 0],
                      [0, 0, 1, 0, 0]], dtype=bool)
_MAX_DILATIONS = 10_000


class DepthError(ValueError):
    pass


def depth_completion(depth: np.ndarray) -> np.ndarray:
    """Fill missing (zero) pixels; valid pixels are returned untouched.

    Holes are grown into by repeated 5x5 diamond grey dilation, then each
    filled pixel is replaced by the 5x5 median of the filled map.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise DepthError(f"depth must be a 2-D map, got shape {depth.shape}")
    if np.any(depth < 0) or not np.all(np.isfinite(depth)):
        raise DepthError("depth must be finite and non-negative")
    missing = depth == 0
    if not missing.any():
        return depth.copy()
    if missing.all():
        raise DepthError("depth map has no valid pixels")

    filled = depth.copy()
    for _ in range(_MAX_DILATIONS):
        holes = filled == 0
        if not holes.any():
            break
        grown = ndimage.grey_dilation(filled, footprint=_DIAMOND5, mode="nearest")
        filled[holes] = grown[holes]
    smoothed = ndimage.median_filter(filled, size=5, mode="nearest")
    out = depth.copy()
    out[missing] = smoothed[missing]
    return out


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise DepthError(f"degenerate intrinsics fx={self.fx}, fy={self.fy}")


DEFAULT_GRAVITY = (0.0, 1.0, 0.0)  # camera frame, y pointing down


def back_project(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """H x W x 3 camera-frame points (x right, y down, z forward)."""
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    x = (u - intr.cx) * depth / intr.fx
    y = (v - intr.cy) * depth / intr.fy
    return np.stack([x, y, depth], axis=-1)


def _unit(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    n = np.linalg.norm(g)
    if n == 0:
        raise DepthError("gravity vector must be non-zero")
    return g / n


def height_above_ground(points: np.ndarray, gravity=DEFAULT_GRAVITY, percentile: float = 1.0) -> np.ndarray:
    """Signed distance along the up direction, offset so the 1st percentile is zero."""
    up = -_unit(gravity)
    heights = points @ up
    return heights - np.percentile(heights, percentile)


def surface_normals(points: np.ndarray) -> np.ndarray:
    """Unit normals from the cross product of image-axis tangents, facing the camera."""
    du = np.gradient(points, axis=1)
    dv = np.gradient(points, axis=0)
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    n = n / np.where(norm > 0, norm, 1.0)
    facing = np.sum(n * points, axis=-1, keepdims=True) > 0
    return np.where(facing, -n, n)


def gravity_angle(points: np.ndarray, gravity=DEFAULT_GRAVITY) -> np.ndarray:
    """Angle in degrees between each surface normal and the up direction."""
    up = -_unit(gravity)
    cos = np.clip(surface_normals(points) @ up, -1.0, 1.0)
    return np.degrees(np.arccos(cos))


@dataclass
class HHA:
    image: np.ndarray          # 3 x H x W in [0, 1]
    raw: np.ndarray            # 3 x H x W before rescaling
    ranges: list[tuple[float, float]]


def _rescale(channel: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = float(channel.min()), float(channel.max())
    if hi > lo:
        return (channel - lo) / (hi - lo), (lo, hi)
    return np.zeros_like(channel), (lo, hi)


def hha_encode(depth: np.ndarray, intr: Intrinsics, gravity=None) -> HHA:
    """Disparity, height above ground, and angle with gravity, each mapped to [0, 1]."""
    intr.validate()
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0):
        raise DepthError("hha_encode needs completed depth (strictly positive)")
    gravity = DEFAULT_GRAVITY if gravity is None else gravity
    points = back_project(depth, intr)
    raw = np.stack([1.0 / depth, height_above_ground(points, gravity), gravity_angle(points, gravity)])
    scaled, ranges = zip(*(_rescale(c) for c in raw))
    return HHA(np.stack(scaled), raw, list(ranges))


def shrink_depth(image: np.ndarray) -> np.ndarray:
    """Bilinear downsample of the last two axes by exactly two."""
    h, w = image.shape[-2:]
    if h % 2 or w % 2:
        raise DepthError(f"shrink_depth needs even extents, got {(h, w)}")
    return resize_array(np.asarray(image, dtype=np.float64), h // 2, w // 2)
