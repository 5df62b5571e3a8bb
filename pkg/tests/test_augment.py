import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rgbd_fusion.data.augment import AugmentError, AugmentPolicy, Transform, augment, augment_arrays, draw_transform
from rgbd_fusion.data.depth import Intrinsics
from rgbd_fusion.data.sample import RgbdSample

FULL = AugmentPolicy(flip_prob=0.5, scale_range=(0.8, 1.25), rotation_deg=15.0, crop_size=(10, 9))


def make_sample(rng, h=12, w=12):
    return RgbdSample(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8), rng.uniform(1, 3, size=(h, w)),
                      rng.integers(0, 5, size=(h, w)).astype(np.uint8), Intrinsics(10, 10, 5.5, 5.5))


def forward_map(tf: Transform, px, py):
    """Source pixel -> output pixel: flip, rotate and scale about the centre, crop."""
    h, w = tf.in_size
    cx, cy = (w - 1) / 2, (h - 1) / 2
    if tf.flip:
        px = (w - 1) - px
    th = np.deg2rad(tf.angle_deg)
    dx, dy = px - cx, py - cy
    qx = tf.scale * (np.cos(th) * dx - np.sin(th) * dy) + cx
    qy = tf.scale * (np.sin(th) * dx + np.cos(th) * dy) + cy
    return qx - tf.offset[1], qy - tf.offset[0]


def test_identity_policy_leaves_sample_unchanged(rng):
    s = make_sample(rng)
    out = augment(s, AugmentPolicy.identity(), rng)
    assert np.array_equal(out.rgb, s.rgb)
    assert np.array_equal(out.depth, s.depth)
    assert np.array_equal(out.label, s.label)


def test_double_flip_is_identity(rng):
    s = make_sample(rng)
    flip = Transform(True, 1.0, 0.0, (0, 0), (12, 12), (12, 12))
    once = augment_arrays(s.rgb, s.depth, s.label, AugmentPolicy(), rng, flip)
    assert np.array_equal(once[0], s.rgb[:, ::-1])
    twice = augment_arrays(once[0], once[1], once[2], AugmentPolicy(), rng, flip)
    assert np.array_equal(twice[0], s.rgb)
    assert np.array_equal(twice[1], s.depth)
    assert np.array_equal(twice[2], s.label)


@given(st.integers(0, 2 ** 31 - 1))
def test_sampling_grid_inverts_the_forward_warp(seed):
    rng = np.random.default_rng(seed)
    tf = draw_transform(FULL, 12, 12, rng)
    sx, sy = tf.grid()
    qx, qy = forward_map(tf, sx, sy)
    yy, xx = np.mgrid[0:tf.out_size[0], 0:tf.out_size[1]]
    assert np.abs(qx - xx).max() <= 1e-9
    assert np.abs(qy - yy).max() <= 1e-9


@given(st.integers(0, 2 ** 31 - 1))
def test_all_modalities_share_one_warp(seed):
    rng = np.random.default_rng(seed)
    h = w = 12
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([xx, yy])                       # depth-like channels encode position
    label = (yy * w + xx).astype(np.uint8)            # every pixel gets a distinct id < 255
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    rgb[..., 0] = (xx * 20).astype(np.uint8)
    rgb_o, coord_o, label_o, tf = augment_arrays(rgb, coords, label, FULL, rng)
    sx, sy = tf.grid()
    inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
    assert np.abs(coord_o[0][inside] - sx[inside]).max(initial=0) <= 1e-9
    assert np.abs(coord_o[1][inside] - sy[inside]).max(initial=0) <= 1e-9
    assert np.all(np.abs(rgb_o[..., 0][inside] - 20 * sx[inside]) <= 0.5 + 1e-9)
    labelled = label_o != 255
    lx, ly = label_o % w, label_o // w
    assert np.all(np.abs(lx[labelled] - sx[labelled]) <= 0.5)
    assert np.all(np.abs(ly[labelled] - sy[labelled]) <= 0.5)
    # pixels mapped far outside the frame carry the ignore label
    far = (sx < -0.5) | (sx >= w - 0.5) | (sy < -0.5) | (sy >= h - 0.5)
    assert np.all(label_o[far] == 255)


def test_photometric_changes_touch_rgb_only(rng):
    s = make_sample(rng)
    policy = AugmentPolicy(brightness=0.3, contrast=0.3, noise_std=5.0)
    out = augment(s, policy, rng)
    assert not np.array_equal(out.rgb, s.rgb)
    assert np.array_equal(out.depth, s.depth)
    assert np.array_equal(out.label, s.label)


def test_scaling_keeps_metric_depth_values(rng):
    s = make_sample(rng)
    s.depth[:] = 2.5
    out = augment(s, AugmentPolicy(scale_range=(1.5, 1.5)), rng)
    assert np.all(out.depth == 2.5)


def test_crop_larger_than_image_raises(rng):
    s = make_sample(rng)
    with pytest.raises(AugmentError):
        augment(s, AugmentPolicy(crop_size=(13, 4)), rng)
