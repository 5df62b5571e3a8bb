"""Reading and writing RGB-D datasets on disk.

Layout of a dataset directory::

    rgb/<stem>.png      8-bit RGB
    depth/<stem>.png    16-bit single channel, millimetres (0 = missing)
    label/<stem>.png    8-bit class ids, 255 = ignore (optional)
    intrinsics.txt      either one global "fx fy cx cy" line, or
                        one "<stem> fx fy cx cy" line per sample
"""

from __future__ import annotations

import io
import os
from pathlib import Path

import numpy as np
from PIL import Image

from ..checkpoint import atomic_write_bytes
from ..ops import IGNORE_INDEX
from .depth import Intrinsics
from .sample import RgbdSample


class DataError(Exception):
    """Base class for structured dataset errors; ``path`` names the culprit."""

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)


class MissingPairError(DataError):
    pass


class DimensionMismatchError(DataError):
    def __init__(self, message: str, paths):
        super().__init__(message, paths[0])
        self.paths = [str(p) for p in paths]


class UnreadableFileError(DataError):
    pass


class MissingDirectoryError(DataError):
    pass


def _read_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            return np.array(im)
    except FileNotFoundError:
        raise MissingPairError(f"file not found: {path}", path) from None
    except Exception as exc:  # PIL raises a variety of decoder errors
        raise UnreadableFileError(f"cannot decode {path}: {exc}", path) from exc


def read_rgb(path) -> np.ndarray:
    arr = _read_image(Path(path))
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (3, 4) or arr.dtype != np.uint8:
        raise UnreadableFileError(f"{path}: expected 8-bit RGB, got {arr.dtype} {arr.shape}", path)
    return np.ascontiguousarray(arr[:, :, :3])


def read_depth(path) -> np.ndarray:
    """16-bit millimetre depth as float64 metres."""
    arr = _read_image(Path(path))
    if arr.ndim != 2 or arr.dtype not in (np.uint16, np.int32, np.uint8):
        raise UnreadableFileError(f"{path}: expected single-channel 16-bit depth, got {arr.dtype} {arr.shape}", path)
    return arr.astype(np.float64) / 1000.0


def read_label(path) -> np.ndarray:
    arr = _read_image(Path(path))
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise UnreadableFileError(f"{path}: expected 8-bit single-channel labels, got {arr.dtype} {arr.shape}", path)
    return arr


def png_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def depth_to_mm(depth: np.ndarray) -> np.ndarray:
    mm = np.round(np.asarray(depth, dtype=np.float64) * 1000.0)
    if mm.min() < 0 or mm.max() > np.iinfo(np.uint16).max:
        raise DataError("depth outside the 16-bit millimetre range")
    return mm.astype(np.uint16)


def parse_intrinsics(path) -> dict[str | None, Intrinsics]:
    """Map stem -> intrinsics; a global line is stored under ``None``."""
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise MissingPairError(f"intrinsics file not found: {path}", path) from None
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}", path) from exc
    table: dict[str | None, Intrinsics] = {}
    for n, line in enumerate(text.splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if len(parts) == 4:
                table[None] = Intrinsics(*map(float, parts))
            elif len(parts) == 5:
                table[parts[0]] = Intrinsics(*map(float, parts[1:]))
            else:
                raise ValueError("expected 4 or 5 fields")
        except ValueError as exc:
            raise UnreadableFileError(f"{path}:{n}: malformed intrinsics line ({exc})", path) from exc
    if not table:
        raise UnreadableFileError(f"{path}: no intrinsics found", path)
    return table


def load_rgbd_sample(rgb_path, depth_path, label_path=None, intrinsics: Intrinsics | None = None,
                     gravity=None) -> RgbdSample:
    """Load one sample; extents of all present files must agree."""
    rgb_path, depth_path = Path(rgb_path), Path(depth_path)
    for p in (rgb_path, depth_path) + ((Path(label_path),) if label_path else ()):
        if not p.exists():
            raise MissingPairError(f"missing pair member: {p}", p)
    rgb = read_rgb(rgb_path)
    depth = read_depth(depth_path)
    if depth.shape != rgb.shape[:2]:
        raise DimensionMismatchError(
            f"extent mismatch: {rgb_path} is {rgb.shape[:2]}, {depth_path} is {depth.shape}",
            (rgb_path, depth_path))
    if label_path is not None:
        label = read_label(label_path)
        if label.shape != depth.shape:
            raise DimensionMismatchError(
                f"extent mismatch: {rgb_path} is {rgb.shape[:2]}, {label_path} is {label.shape}",
                (rgb_path, Path(label_path)))
    else:
        label = np.full(depth.shape, IGNORE_INDEX, dtype=np.uint8)
    if intrinsics is None:
        raise DataError(f"no intrinsics supplied for {rgb_path}", rgb_path)
    return RgbdSample(rgb, depth, label, intrinsics, gravity, rgb_path.stem).validate()


def list_stems(root) -> list[str]:
    root = Path(root)
    for sub in ("rgb", "depth"):
        if not (root / sub).is_dir():
            raise MissingDirectoryError(f"dataset directory lacks {sub}/: {root / sub}", root / sub)
    rgb = {p.stem for p in (root / "rgb").glob("*.png")}
    depth = {p.stem for p in (root / "depth").glob("*.png")}
    for stem in sorted(rgb ^ depth):
        have, lack = ("rgb", "depth") if stem in rgb else ("depth", "rgb")
        raise MissingPairError(f"{root / have / (stem + '.png')} has no {lack} partner",
                               root / lack / (stem + ".png"))
    return sorted(rgb)


def load_dataset_dir(root) -> list[RgbdSample]:
    root = Path(root)
    stems = list_stems(root)
    table = parse_intrinsics(root / "intrinsics.txt")
    has_labels = (root / "label").is_dir()
    out = []
    for stem in stems:
        intr = table.get(stem, table.get(None))
        if intr is None:
            raise DataError(f"no intrinsics for sample {stem}", root / "intrinsics.txt")
        label = root / "label" / f"{stem}.png" if has_labels else None
        out.append(load_rgbd_sample(root / "rgb" / f"{stem}.png", root / "depth" / f"{stem}.png",
                                    label, intr))
    return out


def write_dataset_dir(root, samples: list[RgbdSample]) -> None:
    """Write samples in the standard layout; every file is written atomically."""
    root = Path(root)
    for sub in ("rgb", "depth", "label"):
        os.makedirs(root / sub, exist_ok=True)
    lines = []
    for s in samples:
        s.validate()
        stem = s.name or f"sample_{len(lines):05d}"
        atomic_write_bytes(root / "rgb" / f"{stem}.png", png_bytes(s.rgb))
        atomic_write_bytes(root / "depth" / f"{stem}.png", png_bytes(depth_to_mm(s.depth)))
        atomic_write_bytes(root / "label" / f"{stem}.png", png_bytes(s.label.astype(np.uint8)))
        i = s.intrinsics
        lines.append(f"{stem} {i.fx!r} {i.fy!r} {i.cx!r} {i.cy!r}")
    atomic_write_bytes(root / "intrinsics.txt", ("\n".join(lines) + "\n").encode())
