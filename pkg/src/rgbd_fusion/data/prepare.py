"""From raw samples to network-ready arrays, in memory or on disk.

The per-sample pipeline is: complete the depth map, encode it as HHA at full
resolution, and keep RGB and labels as they are. Shrinking and augmentation
are applied when batches are drawn, so that one geometric transform can be
shared by RGB, full-resolution HHA and labels before the HHA is halved.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import atomic_write_bytes
from .augment import AugmentPolicy, augment_arrays
from .depth import depth_completion, hha_encode, shrink_depth
from .io import DataError, load_dataset_dir, write_dataset_dir
from .sample import RgbdSample

RGB_MEAN, RGB_STD = 0.5, 0.25
HHA_MEAN, HHA_STD = 0.5, 0.25
MANIFEST = "manifest.json"


@dataclass
class PreparedDataset:
    rgb: np.ndarray      # N x H x W x 3 uint8
    hha: np.ndarray      # N x 3 x H x W float in [0, 1]
    label: np.ndarray    # N x H x W uint8
    names: list[str]

    def __len__(self) -> int:
        return len(self.names)

    def subset(self, idx) -> "PreparedDataset":
        idx = list(idx)
        return PreparedDataset(self.rgb[idx], self.hha[idx], self.label[idx], [self.names[i] for i in idx])


def preprocess(sample: RgbdSample) -> tuple[np.ndarray, np.ndarray]:
    """Completed depth and its full-resolution HHA image for one sample."""
    completed = depth_completion(sample.depth)
    return completed, hha_encode(completed, sample.intrinsics, sample.gravity).image


def prepare_samples(samples: list[RgbdSample]) -> PreparedDataset:
    if not samples:
        raise DataError("cannot prepare an empty dataset")
    shapes = {s.label.shape for s in samples}
    if len(shapes) != 1:
        raise DataError(f"all samples must share one extent, got {sorted(shapes)}")
    hha = np.stack([preprocess(s)[1] for s in samples])
    return PreparedDataset(np.stack([s.rgb for s in samples]), hha,
                           np.stack([s.label for s in samples]).astype(np.uint8),
                           [s.name for s in samples])


def network_inputs(rgb: np.ndarray, hha: np.ndarray, shrink: bool, dtype=np.float64):
    """Normalise a batch: rgb (N,H,W,3) uint8 -> (N,3,H,W); hha optionally halved."""
    x_rgb = (np.moveaxis(rgb, -1, 1).astype(np.float64) / 255.0 - RGB_MEAN) / RGB_STD
    depth = shrink_depth(hha) if shrink else np.asarray(hha, dtype=np.float64)
    x_depth = (depth - HHA_MEAN) / HHA_STD
    return x_rgb.astype(dtype), x_depth.astype(dtype)


def draw_batch(ds: PreparedDataset, idx, shrink: bool, policy: AugmentPolicy | None = None,
               seed: int = 0, step: int = 0, dtype=np.float64):
    """Batch of network inputs and int64 labels.

    Each sample is augmented with a generator seeded by (seed, step, index),
    so the result does not depend on how batches are split across workers.
    """
    rgb, hha, lab = [], [], []
    for i in idx:
        r, h, l = ds.rgb[i], ds.hha[i], ds.label[i]
        if policy is not None:
            rng = np.random.default_rng([seed, step, int(i)])
            r, h, l, _ = augment_arrays(r, h, l, policy, rng)
        rgb.append(r)
        hha.append(h)
        lab.append(l)
    x_rgb, x_depth = network_inputs(np.stack(rgb), np.stack(hha), shrink, dtype)
    return x_rgb, x_depth, np.stack(lab).astype(np.int64)


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Indices for one step: a fresh permutation per epoch, seeded by (seed, epoch)."""
    per_epoch = max(1, n // batch_size) if batch_size <= n else 1
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    if batch_size >= n:
        return perm
    return perm[pos * batch_size:(pos + 1) * batch_size]


# -- on-disk prepared datasets ------------------------------------------------

def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_prepared(out_dir, samples: list[RgbdSample], source: dict) -> dict:
    """Materialise raw files, completed depth, HHA and shrunk HHA plus a manifest.

    The manifest is written last and atomically, so a directory either has a
    complete manifest or none at all.
    """
    out = Path(out_dir)
    names = [s.name for s in samples]
    if not samples or not all(names) or len(set(names)) != len(names):
        raise DataError("prepared datasets need non-empty, unique sample names")
    if (out / MANIFEST).exists():
        os.remove(out / MANIFEST)
    write_dataset_dir(out, samples)
    for sub in ("completed", "hha", "hha_shrunk"):
        os.makedirs(out / sub, exist_ok=True)
    entries = []
    for s in samples:
        completed, hha = preprocess(s)
        files = {
            "rgb": f"rgb/{s.name}.png",
            "depth": f"depth/{s.name}.png",
            "label": f"label/{s.name}.png",
            "completed": f"completed/{s.name}.npy",
            "hha": f"hha/{s.name}.npy",
            "hha_shrunk": f"hha_shrunk/{s.name}.npy",
        }
        atomic_write_bytes(out / files["completed"], _npy_bytes(completed))
        atomic_write_bytes(out / files["hha"], _npy_bytes(hha))
        atomic_write_bytes(out / files["hha_shrunk"], _npy_bytes(shrink_depth(hha)))
        entries.append({"name": s.name, "files": {k: {"path": v, "sha256": sha256_file(out / v)}
                                                  for k, v in files.items()}})
    manifest = {"count": len(entries), "source": source,
                "intrinsics_sha256": sha256_file(out / "intrinsics.txt"), "samples": entries}
    atomic_write_bytes(out / MANIFEST, (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    return manifest


def load_prepared(out_dir) -> PreparedDataset:
    """Read a prepared directory, verifying every digest in its manifest."""
    out = Path(out_dir)
    try:
        manifest = json.loads((out / MANIFEST).read_text())
    except FileNotFoundError:
        raise DataError(f"no manifest in prepared directory {out}", out / MANIFEST) from None
    for entry in manifest["samples"]:
        for info in entry["files"].values():
            if sha256_file(out / info["path"]) != info["sha256"]:
                raise DataError(f"digest mismatch for {out / info['path']}", out / info["path"])
    samples = load_dataset_dir(out)
    by_name = {s.name: s for s in samples}
    names = [e["name"] for e in manifest["samples"]]
    hha = np.stack([np.load(out / e["files"]["hha"]["path"]) for e in manifest["samples"]])
    return PreparedDataset(np.stack([by_name[n].rgb for n in names]), hha,
                           np.stack([by_name[n].label for n in names]), names)
