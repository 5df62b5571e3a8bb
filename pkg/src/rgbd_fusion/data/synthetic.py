"""Synthetic complementary-modality segmentation scenes.

Each scene is a grey back wall with a brown floor in front of it, seen by a
pinhole camera. Square objects, aligned to a grid of cells, hang on the wall
and come in four kinds:

* ``a_only``: painted in the class colour but flush with the wall, so the
  depth map cannot see them;
* ``b_only``: protruding to the class depth level but painted wall grey, so
  the colour image cannot see them;
* ``both``: class colour at the class depth level;
* ``joint``: one of two colours and one of two depth levels; the class is
  the XOR of the two choices, so neither modality alone determines it.

Joint objects use the last two class ids. Both wall and floor are class 0.
Depth is quantised to whole millimetres so that it survives 16-bit storage
exactly. Every sample draws from its own generator seeded by
``(seed, index)``, so any subset can be regenerated independently.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .depth import Intrinsics
from .sample import RgbdSample

WALL_DEPTH = 3.0
WALL_COLOR = (128, 128, 128)
FLOOR_COLOR = (96, 72, 48)
_PALETTE = [(220, 40, 40), (40, 200, 60), (50, 80, 230), (230, 210, 40), (200, 60, 210),
            (40, 210, 210), (250, 140, 30), (140, 90, 220), (20, 20, 20), (240, 240, 240)]
_JOINT_COLORS = [(250, 120, 160), (30, 110, 40)]
KINDS = ("a_only", "b_only", "both", "joint")


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticTaskSpec:
    size: int = 32
    num_classes: int = 5
    frac_a_only: float = 0.0
    frac_b_only: float = 0.0
    frac_both: float = 1.0
    frac_joint: float = 0.0
    rgb_noise: float = 0.0          # intensity units
    depth_noise: float = 0.0        # metres
    missing_fraction: float = 0.0   # share of depth pixels dropped to 0
    num_samples: int = 8
    objects_per_image: tuple[int, int] = (2, 3)
    floor_fraction: float = 0.25
    cell: int = 8                   # objects are unions of cell x cell blocks
    max_object_cells: int = 2       # object side, in cells
    seed: int = 0

    @property
    def fractions(self) -> tuple[float, float, float, float]:
        return (self.frac_a_only, self.frac_b_only, self.frac_both, self.frac_joint)

    @property
    def single_classes(self) -> list[int]:
        """Class ids used by a_only / b_only / both objects."""
        top = self.num_classes - (2 if self.frac_joint > 0 else 0)
        return list(range(1, top))

    @property
    def joint_classes(self) -> tuple[int, int]:
        return (self.num_classes - 2, self.num_classes - 1)

    def validate(self) -> "SyntheticTaskSpec":
        fr = self.fractions
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise SyntheticSpecError(f"object-kind fractions must be non-negative and sum to 1, got {fr}")
        if self.cell < 2 or self.cell % 2 or self.size % self.cell or self.size < 4 * self.cell:
            raise SyntheticSpecError(
                f"size must be a multiple of an even cell and span at least 4 cells, got {self.size}, {self.cell}")
        if self.max_object_cells < 1:
            raise SyntheticSpecError("max_object_cells must be positive")
        if not self.single_classes and (self.frac_a_only or self.frac_b_only or self.frac_both):
            raise SyntheticSpecError("num_classes too small for single-modality object classes")
        if self.frac_joint > 0 and self.num_classes < 3:
            raise SyntheticSpecError("joint objects need at least three classes")
        if len(self.single_classes) > len(_PALETTE):
            raise SyntheticSpecError(f"at most {len(_PALETTE)} single classes are supported")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise SyntheticSpecError(f"objects_per_image must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if not 0 <= self.missing_fraction < 1 or self.rgb_noise < 0 or self.depth_noise < 0:
            raise SyntheticSpecError("noise levels must be non-negative and missing_fraction in [0, 1)")
        if not 0.1 <= self.floor_fraction <= 0.5:
            raise SyntheticSpecError("floor_fraction must lie in [0.1, 0.5]")
        if self.num_samples < 1:
            raise SyntheticSpecError("num_samples must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["objects_per_image"] = list(self.objects_per_image)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SyntheticSpecError(f"unknown synthetic keys: {sorted(unknown)}")
        d = dict(d)
        if "objects_per_image" in d:
            d["objects_per_image"] = tuple(d["objects_per_image"])
        return cls(**d).validate()


@dataclass(frozen=True)
class Templates:
    """Appearance of every class in each modality, used by generators and oracles."""

    class_colors: dict[int, tuple[int, int, int]]
    class_depths: dict[int, float]
    joint_colors: list[tuple[int, int, int]] = field(default_factory=list)
    joint_depths: list[float] = field(default_factory=list)


def templates(spec: SyntheticTaskSpec) -> Templates:
    singles = spec.single_classes
    n_levels = len(singles) + (2 if spec.frac_joint > 0 else 0)
    levels = np.round(np.linspace(2.0, 2.7, max(n_levels, 1)), 3)
    colors = {k: _PALETTE[i] for i, k in enumerate(singles)}
    depths = {k: float(levels[i]) for i, k in enumerate(singles)}
    if spec.frac_joint > 0:
        return Templates(colors, depths, list(_JOINT_COLORS), [float(levels[-2]), float(levels[-1])])
    return Templates(colors, depths)


def camera(spec: SyntheticTaskSpec) -> tuple[Intrinsics, float, int]:
    """Intrinsics, camera height above the floor, and first floor row."""
    s = spec.size
    intr = Intrinsics(float(s), float(s), (s - 1) / 2.0, (s - 1) / 2.0)
    cells = s // spec.cell
    floor_row = spec.cell * max(1, int(round(cells * (1.0 - spec.floor_fraction))))
    # the floor meets the wall exactly half a row above the first floor row
    cam_height = (floor_row - 0.5 - intr.cy) * WALL_DEPTH / intr.fy
    return intr, cam_height, floor_row


def background(spec: SyntheticTaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free background colour (H x W x 3) and depth (H x W)."""
    s = spec.size
    intr, cam_height, floor_row = camera(spec)
    rgb = np.empty((s, s, 3), dtype=np.float64)
    rgb[:] = WALL_COLOR
    rgb[floor_row:] = FLOOR_COLOR
    depth = np.full((s, s), WALL_DEPTH)
    rows = np.arange(floor_row, s, dtype=np.float64)
    depth[floor_row:] = (cam_height * intr.fy / (rows - intr.cy))[:, None]
    return rgb, depth


def _draw_object(rng, spec: SyntheticTaskSpec, tpl: Templates):
    kind = KINDS[int(rng.choice(4, p=np.asarray(spec.fractions)))]
    if kind == "joint":
        ci, di = int(rng.integers(2)), int(rng.integers(2))
        cls = spec.joint_classes[0] if ci == di else spec.joint_classes[1]
        return cls, tpl.joint_colors[ci], tpl.joint_depths[di]
    cls = int(rng.choice(spec.single_classes))
    color = WALL_COLOR if kind == "b_only" else tpl.class_colors[cls]
    depth = WALL_DEPTH if kind == "a_only" else tpl.class_depths[cls]
    return cls, color, depth


def render(spec: SyntheticTaskSpec, index: int) -> RgbdSample:
    rng = np.random.default_rng([spec.seed, index])
    tpl = templates(spec)
    intr, _, floor_row = camera(spec)
    rgb, depth = background(spec)
    label = np.zeros((spec.size, spec.size), dtype=np.uint8)

    lo, hi = spec.objects_per_image
    rows, cols = floor_row // spec.cell, spec.size // spec.cell
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls, color, level = _draw_object(rng, spec, tpl)
        n = int(rng.integers(1, min(spec.max_object_cells, rows, cols) + 1))
        side = n * spec.cell
        top = spec.cell * int(rng.integers(0, rows - n + 1))
        left = spec.cell * int(rng.integers(0, cols - n + 1))
        sl = (slice(top, top + side), slice(left, left + side))
        rgb[sl] = color
        depth[sl] = level
        label[sl] = cls

    if spec.rgb_noise:
        rgb = rgb + rng.normal(0.0, spec.rgb_noise, size=rgb.shape)
    if spec.depth_noise:
        depth = depth + rng.normal(0.0, spec.depth_noise, size=depth.shape)
    depth = np.maximum(np.round(depth * 1000.0), 1.0) / 1000.0
    if spec.missing_fraction:
        depth[rng.random(depth.shape) < spec.missing_fraction] = 0.0
    rgb8 = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    return RgbdSample(rgb8, depth, label, intr, None, f"synth_{spec.seed}_{index:05d}").validate()


def synth_generate(spec: SyntheticTaskSpec) -> list[RgbdSample]:
    """Deterministic list of ``spec.num_samples`` scenes."""
    spec.validate()
    return [render(spec, i) for i in range(spec.num_samples)]
