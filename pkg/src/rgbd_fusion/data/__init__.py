"""RGB-D ingestion, depth preprocessing, augmentation and synthetic scenes."""

from .augment import AugmentError, AugmentPolicy, Transform, augment, augment_arrays
from .depth import DepthError, HHA, Intrinsics, depth_completion, hha_encode, shrink_depth
from .io import (DataError, DimensionMismatchError, MissingDirectoryError, MissingPairError,
                 UnreadableFileError, load_dataset_dir, load_rgbd_sample, write_dataset_dir)
from .prepare import PreparedDataset, draw_batch, load_prepared, prepare_samples, write_prepared
from .sample import RgbdSample, SampleError
from .synthetic import SyntheticSpecError, SyntheticTaskSpec, synth_generate, templates

__all__ = [
    "AugmentError", "AugmentPolicy", "Transform", "augment", "augment_arrays",
    "DepthError", "HHA", "Intrinsics", "depth_completion", "hha_encode", "shrink_depth",
    "DataError", "DimensionMismatchError", "MissingDirectoryError", "MissingPairError",
    "UnreadableFileError", "load_dataset_dir", "load_rgbd_sample", "write_dataset_dir",
    "PreparedDataset", "draw_batch", "load_prepared", "prepare_samples", "write_prepared",
    "RgbdSample", "SampleError",
    "SyntheticSpecError", "SyntheticTaskSpec", "synth_generate", "templates",
]
