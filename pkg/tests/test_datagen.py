from __future__ import annotations

import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aniso import datagen
from aniso.datagen import DatasetError, LinSepSpec


def e(k: int, d: int) -> np.ndarray:
    v = np.zeros(d)
    v[k] = 1.0
    return v


def test_noiseless_sample_is_the_margin_times_direction():
    spec = LinSepSpec(e(0, 16), 1.0, 0.0, 10, 0, 4, 4)
    d = datagen.sample_linsep(spec)
    pos = d.images[d.labels == 1].reshape(-1, 16)
    np.testing.assert_array_equal(pos, np.tile(e(0, 16), (len(pos), 1)))


def test_non_unit_direction_is_rejected():
    with pytest.raises(DatasetError, match="unit"):
        LinSepSpec(np.ones(4), 1.0, 1.0, 4, 4, 2, 2)
    with pytest.raises(DatasetError, match="epsilon"):
        LinSepSpec(e(0, 4), 0.0, 1.0, 4, 4, 2, 2)


def test_moments_in_four_dimensions():
    n = 100_000
    d = datagen.sample_linsep(LinSepSpec(e(0, 4), 1.0, 1.0, n, 0, 2, 2, seed=3))
    x = d.images.reshape(n, 4).astype(np.float64)
    pos = x[d.labels == 1]
    tol = 4 * 1.0 / np.sqrt(len(pos))
    np.testing.assert_allclose(pos.mean(axis=0), [1, 0, 0, 0], atol=tol)
    gen = np.random.default_rng(0)
    for _ in range(5):
        u = gen.standard_normal(4)
        u[0] = 0
        u /= np.linalg.norm(u)
        assert abs(np.var(x @ u) - 1.0) <= 0.05


@settings(max_examples=25)
@given(st.integers(1, 60), st.floats(0.1, 4), st.floats(0, 3), st.integers(0, 2**31))
def test_margin_and_balance_hold_for_any_spec(n, eps, sigma, seed):
    v = np.random.default_rng(seed).standard_normal(9)
    v /= np.linalg.norm(v)
    d = datagen.sample_linsep(LinSepSpec(v, eps, sigma, n, 0, 3, 3, seed=seed))
    proj = d.images.reshape(n, 9).astype(np.float64) @ v
    assert np.max(np.abs(proj - eps * d.labels)) <= 1e-5 * (1 + eps + 3 * sigma * 3)
    assert abs(int(np.sum(d.labels == 1)) - int(np.sum(d.labels == -1))) <= 1


def test_sampling_is_deterministic_per_seed_and_split():
    spec = LinSepSpec(e(2, 16), 1.0, 1.0, 50, 50, 4, 4, seed=11)
    a, b = datagen.linsep_splits(spec), datagen.linsep_splits(spec)
    assert a[0].images.tobytes() == b[0].images.tobytes()
    assert a[0].images.tobytes() != a[1].images.tobytes()


def two_sets(n=40, seed=0):
    a = datagen.sample_linsep(LinSepSpec(e(0, 16), 1.0, 1.0, n, 0, 4, 4, seed=seed))
    b = datagen.sample_linsep(LinSepSpec(e(5, 16), 0.5, 1.0, n, 0, 4, 4, seed=seed + 1))
    return a, b


def test_concat_pairs_same_label_samples():
    a, b = two_sets()
    c = datagen.concat_channels(a, b, seed=4)
    assert c.shape == (2, 4, 4)
    np.testing.assert_array_equal(c.images[:, :1], a.images)
    np.testing.assert_array_equal(c.labels, a.labels)
    # the second block holds a within-class permutation of b
    for y in (-1, 1):
        got = np.sort(c.images[c.labels == y, 1].reshape(-1, 16), axis=0)
        want = np.sort(b.images[b.labels == y, 0].reshape(-1, 16), axis=0)
        np.testing.assert_array_equal(got, want)
    # channel 1 still carries its own label along e5
    np.testing.assert_allclose(c.images[:, 1].reshape(-1, 16)[:, 5], 0.5 * c.labels, atol=1e-6)
    assert datagen.channel_blocks(c) == [[0], [1]]


def test_self_concat_of_one_sample_per_class_duplicates_channels():
    a = datagen.sample_linsep(LinSepSpec(e(1, 16), 1.0, 1.0, 2, 0, 4, 4))
    c = datagen.concat_channels(a, a, seed=0)
    np.testing.assert_array_equal(c.images[:, 0], c.images[:, 1])


def test_concat_rejects_mismatched_label_counts_and_dims():
    a, _ = two_sets(40)
    b = datagen.sample_linsep(LinSepSpec(e(0, 16), 1.0, 1.0, 38, 0, 4, 4))
    with pytest.raises(DatasetError, match="label"):
        datagen.concat_channels(a, b)
    small = datagen.sample_linsep(LinSepSpec(e(0, 9), 1.0, 1.0, 40, 0, 3, 3))
    with pytest.raises(DatasetError, match="spatial"):
        datagen.concat_channels(a, small)


def test_ablation_zeroes_other_channels():
    x = np.random.default_rng(0).standard_normal((3, 4, 2, 2))
    out = datagen.ablate_channels(x, [1, 3])
    np.testing.assert_array_equal(out[:, [1, 3]], x[:, [1, 3]])
    np.testing.assert_array_equal(out[:, [0, 2]], 0)
    with pytest.raises(IndexError):
        datagen.ablate_channels(x, [4])


# ---------------------------------------------------------------------------
# CIFAR-10


def reference_first_record(path) -> tuple[int, np.ndarray]:
    with open(path, "rb") as fh:
        label = struct.unpack("B", fh.read(1))[0]
        pixels = np.array(struct.unpack("3072B", fh.read(3072)), dtype=np.uint8).reshape(3, 32, 32)
    return label, pixels


def test_batch_parse_matches_reference_reader(fake_cifar_dir):
    path = fake_cifar_dir / "data_batch_1.bin"
    assert path.stat().st_size == 30_730_000
    classes, pixels = datagen.parse_cifar_batch(path)
    assert classes.shape == (10_000,) and pixels.shape == (10_000, 3, 32, 32)
    label, first = reference_first_record(path)
    assert classes[0] == label
    np.testing.assert_array_equal(pixels[0], first)


def test_truncated_batch_reports_final_record_offset(tmp_path, fake_cifar_dir):
    blob = (fake_cifar_dir / "data_batch_1.bin").read_bytes()
    short = tmp_path / "short.bin"
    short.write_bytes(blob[:-1])
    with pytest.raises(datagen.CifarParseError) as info:
        datagen.parse_cifar_batch(short)
    assert info.value.offset == 9_999 * 3073


def test_corrupt_label_byte_is_reported(tmp_path, fake_cifar_dir):
    blob = bytearray((fake_cifar_dir / "data_batch_1.bin").read_bytes())
    blob[3073 * 17] = 12
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(datagen.CifarParseError, match="corrupt record 17"):
        datagen.parse_cifar_batch(bad)


def test_missing_batch_file(tmp_path):
    with pytest.raises(datagen.CifarParseError, match="missing"):
        datagen.load_cifar10(tmp_path)


def test_load_and_binarize(fake_cifar_dir):
    train, test = datagen.load_cifar10(fake_cifar_dir)
    assert train.images.shape == (50_000, 3, 32, 32) and len(test) == 10_000
    assert train.images.min() >= 0 and train.images.max() <= 1
    btrain, btest = datagen.binarize_cifar(train), datagen.binarize_cifar(test)
    assert np.sum(btrain.labels == -1) == np.sum(btrain.labels == 1) == 25_000
    assert np.sum(btest.labels == -1) == np.sum(btest.labels == 1) == 5_000
    for c, y in ((3, -1), (7, 1), (5, 1), (4, -1)):
        assert np.all(btrain.labels[btrain.classes == c] == y)
    sub = datagen.balanced_subset(btrain, 1000, seed=2)
    assert np.sum(sub.labels == 1) == 500
    assert sub.images.tobytes() == datagen.balanced_subset(btrain, 1000, seed=2).images.tobytes()


def test_normalization_uses_train_statistics():
    gen = np.random.default_rng(0)
    train = datagen.DatasetHandle((3 + 2 * gen.standard_normal((500, 2, 3, 3))).astype(np.float32),
                                  np.ones(500, np.int8), "train")
    test = datagen.DatasetHandle(np.full((4, 2, 3, 3), 3.0, np.float32), np.ones(4, np.int8), "test")
    ntrain = datagen.normalize(train, "standardize")
    np.testing.assert_allclose(ntrain.images.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(ntrain.images.std(axis=(0, 2, 3)), 1, atol=1e-4)
    with pytest.raises(DatasetError, match="train split"):
        datagen.normalize(test, "standardize")
    ntest = datagen.normalize(test, "standardize", stats=ntrain.provenance["normalization"])
    assert abs(float(ntest.images.mean())) < 0.1
    assert datagen.normalize(test, "none") is test


def test_dataset_file_round_trip(tmp_path):
    a, b = two_sets()
    c = datagen.concat_channels(a, b, seed=1)
    sidecar = datagen.save_dataset(tmp_path / "d.bin", c)
    assert sidecar.exists()
    back = datagen.load_dataset(tmp_path / "d.bin")
    assert back.images.tobytes() == c.images.tobytes()
    np.testing.assert_array_equal(back.labels, c.labels)
    assert datagen.channel_blocks(back) == [[0], [1]]
    raw = (tmp_path / "d.bin").read_bytes()
    (tmp_path / "d.bin").write_bytes(raw[:-4])
    with pytest.raises(DatasetError, match="bytes"):
        datagen.load_dataset(tmp_path / "d.bin")
