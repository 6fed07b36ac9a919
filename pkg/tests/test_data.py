import os
import struct

import numpy as np
import pytest
from scipy import stats

from src.data import (
    CIFAR_RECORD, MNIST_MEAN, MNIST_STD, DatasetSpec, augment_batch, denormalize, iterate_batches,
    load_cifar10_bin, load_dataset, load_mnist, load_mnist_idx, sample_batch, synth_seq_task,
)
from src.errors import ConfigError, DataError


def _paths(directory, split='train'):
    prefix = 'train' if split == 'train' else 't10k'
    return (os.path.join(directory, f"{prefix}-images-idx3-ubyte"),
            os.path.join(directory, f"{prefix}-labels-idx1-ubyte"))


def test_mnist_crafted_fixture(tmp_path, idx_writer):
    images, labels = idx_writer(str(tmp_path), 'train', 10, seed=4)
    handle = load_mnist_idx(*_paths(str(tmp_path)))
    assert handle.examples == 10
    assert handle.input_shape == (1, 28, 28)
    assert handle.num_classes == 10
    np.testing.assert_array_equal(handle.targets, labels)
    scaled = handle.inputs[0, 0, 0, 0] * MNIST_STD[0] + MNIST_MEAN[0]
    assert scaled == pytest.approx(images[0, 0, 0] / 255.0)


def test_mnist_denormalize_is_lossless(tmp_path, idx_writer):
    images, _ = idx_writer(str(tmp_path), 'train', 12, seed=5)
    handle = load_mnist_idx(*_paths(str(tmp_path)))
    np.testing.assert_array_equal(denormalize(handle, handle.inputs)[:, 0], images)


def test_mnist_gzip_and_directory_lookup(tmp_path, idx_writer):
    directory = str(tmp_path / 'raw')
    idx_writer(os.path.join(directory, 'mnist'), 'test', 7, gz=True)
    handle = load_mnist(directory, split='test')
    assert handle.examples == 7


def test_mnist_bad_magic(tmp_path, idx_writer):
    directory = str(tmp_path)
    idx_writer(directory, 'train', 5)
    images, labels = _paths(directory)
    with open(labels, 'r+b') as f:
        f.write(struct.pack('>I', 2051))
    with pytest.raises(DataError, match='bad magic'):
        load_mnist_idx(images, labels)


def test_mnist_truncated_and_count_mismatch(tmp_path, idx_writer):
    directory = str(tmp_path)
    idx_writer(directory, 'train', 5)
    images, labels = _paths(directory)
    with open(images, 'rb') as f:
        blob = f.read()
    with open(images, 'wb') as f:
        f.write(blob[:-10])
    with pytest.raises(DataError, match='truncated'):
        load_mnist_idx(images, labels)

    idx_writer(directory, 'train', 5)
    with open(labels, 'wb') as f:
        f.write(struct.pack('>II', 2049, 4) + bytes(4))
    with pytest.raises(DataError, match='labels'):
        load_mnist_idx(images, labels)


def test_mnist_missing_files(tmp_path):
    with pytest.raises(DataError, match='not found'):
        load_mnist(str(tmp_path), 'train')


def test_cifar_records(cifar_dir):
    train = load_cifar10_bin(cifar_dir, 'train')
    assert train.examples == 64
    assert train.input_shape == (3, 32, 32)
    test = load_cifar10_bin(cifar_dir, 'test')
    assert test.examples == 16


def test_cifar_denormalize_is_lossless(tmp_path, cifar_writer):
    pixels, labels = cifar_writer(str(tmp_path), 'test_batch.bin', 9, seed=8)
    handle = load_cifar10_bin(str(tmp_path), 'test')
    np.testing.assert_array_equal(denormalize(handle, handle.inputs), pixels)
    np.testing.assert_array_equal(handle.targets, labels)


def test_cifar_subset_cap_is_deterministic(cifar_dir):
    first = load_cifar10_bin(cifar_dir, 'train', subset=20, seed=3)
    second = load_cifar10_bin(cifar_dir, 'train', subset=20, seed=3)
    assert first.examples == 20
    np.testing.assert_array_equal(first.inputs, second.inputs)


def test_cifar_truncated_record(tmp_path):
    with open(tmp_path / 'data_batch_1.bin', 'wb') as f:
        f.write(bytes(CIFAR_RECORD - 1))
    with pytest.raises(DataError, match='multiple'):
        load_cifar10_bin(str(tmp_path), 'train')


def test_cifar_label_out_of_range(tmp_path):
    record = bytearray(CIFAR_RECORD)
    record[0] = 10
    with open(tmp_path / 'test_batch.bin', 'wb') as f:
        f.write(bytes(record))
    with pytest.raises(DataError, match='out of range'):
        load_cifar10_bin(str(tmp_path), 'test')


def test_cifar_missing_directory(tmp_path):
    with pytest.raises(DataError):
        load_cifar10_bin(str(tmp_path / 'nowhere'), 'train')


def test_synth_copy_and_reverse():
    copy = synth_seq_task(12, 3, 50, 'copy', seed=1)
    reverse = synth_seq_task(12, 3, 50, 'reverse', seed=1)
    np.testing.assert_array_equal(copy.inputs, reverse.inputs)
    np.testing.assert_array_equal(copy.targets[:, :3], copy.inputs)
    np.testing.assert_array_equal(reverse.targets[:, :3], reverse.inputs[:, ::-1])
    assert copy.inputs.min() >= 3 and copy.inputs.max() < 12
    assert np.all(copy.targets[:, -1] == copy.targets[0, -1])


def test_synth_invalid_sizes():
    with pytest.raises(DataError):
        synth_seq_task(3, 4, 10)
    with pytest.raises(DataError):
        synth_seq_task(10, 0, 10)
    with pytest.raises(DataError):
        synth_seq_task(10, 4, 10, kind='sort')


def test_synth_train_and_test_splits_differ():
    spec = DatasetSpec(name='synth-seq', train_count=64, test_count=64)
    train = load_dataset(spec, 'train', seed=0)
    test = load_dataset(spec, 'test', seed=0)
    assert not np.array_equal(train.inputs, test.inputs)


def test_sample_batch_is_deterministic(toy_dataset):
    a = sample_batch(toy_dataset, 32, np.random.default_rng(9))
    b = sample_batch(toy_dataset, 32, np.random.default_rng(9))
    np.testing.assert_array_equal(a.indices, b.indices)
    assert len(np.unique(a.indices)) == 32
    assert len(a) == a.inputs.shape[0]


def test_full_batch_is_a_permutation(toy_dataset):
    batch = sample_batch(toy_dataset, len(toy_dataset), np.random.default_rng(0))
    np.testing.assert_array_equal(np.sort(batch.indices), np.arange(len(toy_dataset)))


def test_sample_batch_too_large(toy_dataset):
    with pytest.raises(DataError):
        sample_batch(toy_dataset, len(toy_dataset) + 1, np.random.default_rng(0))


def test_sample_batch_uniformity():
    handle = synth_seq_task(8, 2, 40, seed=0)
    rng = np.random.default_rng(2024)
    counts = np.zeros(40)
    for _ in range(10000):
        counts[sample_batch(handle, 4, rng).indices] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_batch_rejects_duplicates(toy_dataset):
    with pytest.raises(DataError):
        toy_dataset.batch([1, 2, 2])


def test_iterate_batches_covers_epoch(toy_dataset):
    seen = np.concatenate([b.indices for b in iterate_batches(toy_dataset, 128, np.random.default_rng(0))])
    np.testing.assert_array_equal(np.sort(seen), np.arange(len(toy_dataset)))


def test_augment_keeps_shape_and_values(cifar_dir):
    handle = load_cifar10_bin(cifar_dir, 'test')
    batch = handle.batch(np.arange(4))
    out = augment_batch(batch, np.random.default_rng(0))
    assert out.inputs.shape == batch.inputs.shape
    np.testing.assert_array_equal(out.targets, batch.targets)
    assert set(np.unique(out.inputs)) <= set(np.unique(batch.inputs)) | {0.0}


def test_dataset_spec_validation():
    with pytest.raises(ConfigError):
        DatasetSpec(name='imagenet').validate()
    with pytest.raises(ConfigError):
        DatasetSpec(name='mnist', augment=True).validate()
    with pytest.raises(ConfigError):
        DatasetSpec(subset=0).validate()


@pytest.mark.slow
def test_real_mnist_counts(real_mnist):
    handle = load_mnist(real_mnist, 'train')
    assert handle.examples == 60000
    assert handle.input_shape == (1, 28, 28)


@pytest.mark.slow
def test_real_cifar_counts(real_cifar):
    handle = load_cifar10_bin(real_cifar, 'test')
    assert handle.examples == 10000
