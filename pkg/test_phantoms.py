"""Tests for phantom generation, dataset splits and the SQDS file format."""

import json
import math

import numpy as np
import pytest

from errors import ArtifactExistsError, ConfigError, FormatError, ShapeError
from metrics import axial_difference, principal_axis
from phantoms import (ROTATION_FIXED, ROTATION_UNIFORM, Dataset, PhantomSpec, assign_splits, decode_dataset,
                      describe, encode_dataset, generate_dataset, generate_phantom, load_dataset, rotated_copy,
                      sidecar_path, write_dataset)


def _power_spectrum(image):
    return np.abs(np.fft.fftshift(np.fft.fft2(image))) ** 2


def test_no_ellipses_gives_blank_image():
    image, phi = generate_phantom(PhantomSpec(extent=16, min_ellipses=0, max_ellipses=0), np.random.default_rng(0))
    assert image.dtype == np.float32
    assert np.all(image == 0.0)
    assert phi == 0.0


def test_values_stay_in_unit_range():
    spec = PhantomSpec(extent=32, min_ellipses=8, max_ellipses=8)
    for i in range(5):
        image, _ = generate_phantom(spec, np.random.default_rng([0, i]))
        assert image.min() >= 0.0
        assert image.max() <= 1.0
        assert image.max() > 0.0


def test_spec_validation():
    with pytest.raises(ConfigError):
        PhantomSpec(extent=12)
    with pytest.raises(ConfigError):
        PhantomSpec(min_ellipses=4, max_ellipses=2)
    with pytest.raises(ConfigError):
        PhantomSpec(rotation="sideways")
    with pytest.raises(ConfigError):
        PhantomSpec(intensity_min=0.5, intensity_max=1.5)


@pytest.mark.parametrize("phi", [0.4, 1.1, 2.3])
def test_spectrum_axis_follows_rotation(phi):
    spec = PhantomSpec(extent=64, min_ellipses=4, max_ellipses=4, aspect_min=0.2, aspect_max=0.25,
                       orientation_jitter=0.0)
    upright, _ = generate_phantom(spec, np.random.default_rng(3), angle=0.0)
    turned, got_phi = generate_phantom(spec, np.random.default_rng(3), angle=phi)
    assert got_phi == phi
    shift = principal_axis(_power_spectrum(turned)) - principal_axis(_power_spectrum(upright))
    assert axial_difference(shift, phi) < math.radians(10.0)


def test_rotation_rules():
    fixed = PhantomSpec(extent=16, rotation=ROTATION_FIXED, angle=0.7)
    assert generate_phantom(fixed, np.random.default_rng(0))[1] == 0.7
    uniform = PhantomSpec(extent=16, rotation=ROTATION_UNIFORM)
    angles = [generate_phantom(uniform, np.random.default_rng(i))[1] for i in range(20)]
    assert all(0.0 <= a < math.pi for a in angles)
    assert len(set(angles)) == 20


def test_dataset_is_reproducible_and_thread_independent():
    spec = PhantomSpec(extent=16, seed=5)
    a = generate_dataset(spec, count=6)
    b = generate_dataset(spec, count=6, workers=3)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    other = generate_dataset(PhantomSpec(extent=16, seed=6), count=6)
    assert not np.array_equal(a.images, other.images)


def test_encoding_round_trip_is_bit_exact():
    dataset = generate_dataset(PhantomSpec(extent=16), count=3)
    decoded = decode_dataset(encode_dataset(dataset))
    assert decoded.images.dtype == np.float32
    np.testing.assert_array_equal(decoded.images, dataset.images)


@pytest.mark.parametrize("mangle", [
    lambda b: b"NOPE" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:-1],
    lambda b: b[:20] + bytes([b[20] ^ 0xFF]) + b[21:],
    lambda b: b[:5],
])
def test_decode_rejects_malformed_files(mangle):
    data = encode_dataset(generate_dataset(PhantomSpec(extent=8), count=2))
    with pytest.raises(FormatError):
        decode_dataset(mangle(data))


def test_write_and_load(tmp_path):
    dataset = generate_dataset(PhantomSpec(extent=16, rotation=ROTATION_UNIFORM), count=5, split_seed=3)
    path = write_dataset(tmp_path / "data.sqds", dataset, metadata={"phantom": {"extent": 16}})
    info = json.loads(sidecar_path(path).read_text())
    assert info["count"] == 5
    assert info["split_seed"] == 3
    assert info["phantom"] == {"extent": 16}

    loaded = load_dataset(path)
    np.testing.assert_array_equal(loaded.images, dataset.images)
    np.testing.assert_array_equal(loaded.labels, dataset.labels)
    np.testing.assert_allclose(loaded.angles, dataset.angles)

    with pytest.raises(ArtifactExistsError):
        write_dataset(path, dataset)


def test_load_rejects_bad_sidecar(tmp_path):
    path = write_dataset(tmp_path / "data.sqds", generate_dataset(PhantomSpec(extent=8), count=1))
    sidecar_path(path).write_text("{not json")
    with pytest.raises(FormatError):
        load_dataset(path)


@pytest.mark.parametrize("count", [1, 7, 10, 101])
def test_splits_are_disjoint_with_rounded_sizes(count):
    labels = assign_splits(count, split_seed=0)
    n_train = int(math.floor(0.8 * count + 0.5))
    assert np.sum(labels == 0) == n_train
    assert np.sum(labels == 1) == min(int(math.floor(0.1 * count + 0.5)), count - n_train)
    assert len(labels) == count
    np.testing.assert_array_equal(labels, assign_splits(count, split_seed=0))


def test_split_seed_changes_assignment():
    assert not np.array_equal(assign_splits(50, 0), assign_splits(50, 1))


def test_bad_split_fractions():
    with pytest.raises(ConfigError):
        assign_splits(10, 0, (0.5, 0.5))
    with pytest.raises(ConfigError):
        assign_splits(10, 0, (0.9, 0.2, -0.1))
    with pytest.raises(ConfigError):
        assign_splits(10, 0, (0.5, 0.2, 0.2))


def test_dataset_views(tiny_dataset):
    assert len(tiny_dataset) == 10
    assert tiny_dataset.extent == 16
    sizes = [len(tiny_dataset.split_indices(name)) for name in ("train", "val", "test")]
    assert sizes == [8, 1, 1]
    assert describe(tiny_dataset) == ["train: 8", "val: 1", "test: 1"]
    with pytest.raises(ValueError):
        tiny_dataset.split_indices("holdout")
    with pytest.raises(ShapeError):
        Dataset(np.zeros((2, 8, 4)))


def test_rotated_copy_uses_new_seed():
    spec = PhantomSpec(extent=16, seed=2)
    rotated = rotated_copy(spec)
    assert rotated.rotation == ROTATION_UNIFORM
    assert rotated.seed == 3
    assert rotated.extent == spec.extent
