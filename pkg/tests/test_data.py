import struct
from collections import Counter

import numpy as np
import pytest

from divpatch.data import (
    Dataset,
    DatasetSpec,
    IdxFormatError,
    batches,
    gen_synthetic,
    load_splits,
    read_idx,
    synthetic_dataset,
    write_idx,
)
from divpatch.vit import patchify


def test_generation_is_pure():
    spec = DatasetSpec(image_size=8, channels=2)
    a, la = gen_synthetic(spec, 3, 17)
    b, lb = gen_synthetic(spec, 3, 17)
    np.testing.assert_array_equal(a, b)
    assert la == lb == 17 % spec.num_classes
    c, _ = gen_synthetic(spec, 4, 17)
    assert not np.array_equal(a, c)


def test_noiseless_same_class_differs_only_by_phase():
    # without noise an image is 0.5 + tint + amp * sin(u + phase) where u
    # depends only on the class; fitting a*sin(u) + b*cos(u) + c per image must
    # leave no residual, and the fitted amplitude must be the grating amplitude
    spec = DatasetSpec(image_size=8, channels=1, num_classes=4, noise_std=0.0)
    k = 1
    theta = np.pi * k / spec.num_classes
    yy, xx = np.mgrid[0:8, 0:8].astype(np.float64)
    u = (2 * np.pi * spec.frequency * (xx * np.cos(theta) + yy * np.sin(theta))).ravel()
    design = np.stack([np.sin(u), np.cos(u), np.ones_like(u)], axis=1)
    offsets = []
    for index in (k, k + 4, k + 8):
        img, label = gen_synthetic(spec, 0, index)
        assert label == k
        coef, *_ = np.linalg.lstsq(design, img.ravel().astype(np.float64), rcond=None)
        assert np.max(np.abs(design @ coef - img.ravel())) < 1e-6
        assert np.hypot(coef[0], coef[1]) == pytest.approx(spec.amplitude, abs=1e-6)
        offsets.append(coef[2])
    assert np.ptp(offsets) < 1e-6


def test_single_patches_are_linearly_separable():
    spec = DatasetSpec(image_size=16, channels=3, num_classes=2, train_size=200, eval_size=200)
    train, test = load_splits(spec, 0)
    rng = np.random.default_rng(0)

    def sample(ds):
        p = patchify(ds.images, 4)  # (N, 16, 48)
        pick = rng.integers(0, p.shape[1], len(ds))
        x = p[np.arange(len(ds)), pick].astype(np.float64)
        return np.hstack([x, np.ones((len(x), 1))]), ds.labels

    x, y = sample(train)
    w, *_ = np.linalg.lstsq(x, np.where(y == 1, 1.0, -1.0), rcond=None)
    xt, yt = sample(test)
    acc = np.mean((xt @ w > 0) == (yt == 1))
    assert acc > 0.75


def test_images_fit_patch_grid():
    spec = DatasetSpec(image_size=32, channels=3)
    ds = synthetic_dataset(spec, 0, 0, 4)
    assert ds.patches(4).shape == (4, 64, 48)
    assert ds.images.dtype == np.float32


def _hand_built_idx(tmp_path):
    pixels = bytes([0, 255, 51, 102, 10, 20, 30, 40, 255, 255, 0, 0, 1, 2, 3, 4])
    images = struct.pack(">IIII", 0x803, 4, 2, 2) + pixels
    labels = struct.pack(">II", 0x801, 4) + bytes([0, 1, 2, 1])
    (tmp_path / "img.idx").write_bytes(images)
    (tmp_path / "lbl.idx").write_bytes(labels)
    return tmp_path / "img.idx", tmp_path / "lbl.idx"


def test_idx_fixture_known_values(tmp_path):
    ds = read_idx(*_hand_built_idx(tmp_path), num_classes=3)
    assert ds.images.shape == (4, 1, 2, 2)
    assert ds.images.dtype == np.float32
    np.testing.assert_array_equal(ds.labels, [0, 1, 2, 1])
    np.testing.assert_allclose(ds.images[0, 0], [[0.0, 1.0], [0.2, 0.4]], atol=1e-7)
    np.testing.assert_allclose(ds.images[3, 0], np.array([[1, 2], [3, 4]]) / 255.0, atol=1e-7)


def test_idx_write_read_round_trip(tmp_path, rng):
    imgs = rng.integers(0, 256, (5, 3, 3), dtype=np.uint8)
    lbls = rng.integers(0, 4, 5, dtype=np.uint8)
    write_idx(tmp_path / "i", imgs)
    write_idx(tmp_path / "l", lbls)
    ds = read_idx(tmp_path / "i", tmp_path / "l", 4)
    np.testing.assert_array_equal(np.round(ds.images[:, 0] * 255).astype(np.uint8), imgs)


def test_idx_errors(tmp_path):
    img, lbl = _hand_built_idx(tmp_path)
    empty = tmp_path / "empty"
    empty.write_bytes(b"")
    with pytest.raises(IdxFormatError):
        read_idx(empty, lbl)
    with pytest.raises(IdxFormatError, match="magic"):
        read_idx(lbl, lbl)
    with pytest.raises(ValueError, match="num_classes"):
        read_idx(img, lbl, num_classes=2)
    short = tmp_path / "short"
    short.write_bytes(struct.pack(">II", 0x801, 3) + bytes([0, 1, 2]))
    with pytest.raises(IdxFormatError, match="labels"):
        read_idx(img, short)


def _toy(n=23):
    return Dataset(np.arange(n * 4, dtype=np.float32).reshape(n, 1, 2, 2), np.arange(n) % 3, 3)


def test_batches_deterministic_and_epoch_dependent():
    ds = _toy()
    first = [b.indices for b in batches(ds, 5, 9, 0, 1)]
    again = [b.indices for b in batches(ds, 5, 9, 0, 1)]
    other = [b.indices for b in batches(ds, 5, 9, 1, 1)]
    assert all(np.array_equal(a, b) for a, b in zip(first, again))
    assert not np.array_equal(np.concatenate(first), np.concatenate(other))


def test_batches_cover_dataset_minus_tail():
    ds = _toy(23)
    got = list(batches(ds, 5, 2, 0, 1))
    assert len(got) == 4 and all(len(b.labels) == 5 for b in got)
    seen = Counter(np.concatenate([b.indices for b in got]).tolist())
    assert all(c == 1 for c in seen.values()) and len(seen) == 20
    for b in got:
        np.testing.assert_array_equal(b.patches, patchify(ds.images[b.indices], 1))
        np.testing.assert_array_equal(b.labels, ds.labels[b.indices])


def test_batch_size_larger_than_dataset():
    with pytest.raises(ValueError):
        next(batches(_toy(4), 5, 0, 0, 1))


def test_dataset_validates_labels():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 1, 2, 2), np.float32), np.array([0, 3]), 3)
