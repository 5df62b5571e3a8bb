"""The RGB-D sample record shared by loaders, augmentation and generators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .depth import Intrinsics


class SampleError(ValueError):
    pass


@dataclass
class RgbdSample:
    rgb: np.ndarray          # H x W x 3 uint8
    depth: np.ndarray        # H x W metres, 0 = missing
    label: np.ndarray        # H x W uint8 class ids, 255 = ignore
    intrinsics: Intrinsics
    gravity: tuple[float, float, float] | None = None
    name: str = ""

    def validate(self) -> "RgbdSample":
        h, w = self.label.shape
        if self.rgb.shape != (h, w, 3):
            raise SampleError(f"{self.name}: rgb shape {self.rgb.shape} does not match label {(h, w)}")
        if self.depth.shape != (h, w):
            raise SampleError(f"{self.name}: depth shape {self.depth.shape} does not match label {(h, w)}")
        if np.any(self.depth < 0):
            raise SampleError(f"{self.name}: negative depth")
        return self
