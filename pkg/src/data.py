"""Dataset ingestion (MNIST IDX, CIFAR-10 binary, synthetic sequences) and batch sampling."""
from dataclasses import dataclass, field, asdict
import glob
import gzip
import os
import struct

import numpy as np

from config.settings import settings
from src.errors import ConfigError, DataError
from src.logger import logger

MNIST_IMAGE_MAGIC = 2051
MNIST_LABEL_MAGIC = 2049
MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)

CIFAR_RECORD = 3073
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

PAD, BOS, EOS = 0, 1, 2
RESERVED_TOKENS = 3

# stats are only asserted on full training sets; small subsets drift legitimately
STATS_CHECK_MIN_EXAMPLES = 50000
STATS_TOLERANCE = 0.01

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}


@dataclass
class Batch:
    indices: np.ndarray
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass
class DatasetHandle:
    kind: str
    inputs: np.ndarray
    targets: np.ndarray
    num_classes: int
    mean: tuple = ()
    std: tuple = ()

    def __len__(self):
        return len(self.targets)

    @property
    def examples(self):
        return len(self.targets)

    @property
    def input_shape(self):
        return tuple(self.inputs.shape[1:])

    def batch(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        if len(np.unique(indices)) != len(indices):
            raise DataError("batch indices must be unique")
        return Batch(indices, self.inputs[indices], self.targets[indices])

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return DatasetHandle(self.kind, self.inputs[indices], self.targets[indices],
                             self.num_classes, self.mean, self.std)


@dataclass
class DatasetSpec:
    name: str = 'mnist'
    data_dir: str = None
    subset: int = None
    test_subset: int = None
    augment: bool = False
    seq_kind: str = 'copy'
    seq_length: int = 8
    seq_vocab: int = 16
    train_count: int = 4096
    test_count: int = 512

    def validate(self):
        if self.name not in ('mnist', 'cifar10', 'synth-seq'):
            raise ConfigError('dataset.name', f"must be mnist, cifar10 or synth-seq, got {self.name!r}")
        for key in ('subset', 'test_subset'):
            value = getattr(self, key)
            if value is not None and (not isinstance(value, int) or value <= 0):
                raise ConfigError(f"dataset.{key}", "must be a positive integer or null")
        if self.seq_kind not in ('copy', 'reverse'):
            raise ConfigError('dataset.seq_kind', "must be 'copy' or 'reverse'")
        if self.seq_vocab < RESERVED_TOKENS + 1:
            raise ConfigError('dataset.seq_vocab', "needs at least one token besides pad/bos/eos")
        for key in ('seq_length', 'train_count', 'test_count'):
            if getattr(self, key) < 1:
                raise ConfigError(f"dataset.{key}", "must be >= 1")
        if self.augment and self.name != 'cifar10':
            raise ConfigError('dataset.augment', "augmentation is only available for cifar10")
        return self

    def to_dict(self):
        return asdict(self)


def _read_bytes(path):
    try:
        opener = gzip.open if path.endswith('.gz') else open
        with opener(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e


def _standardize(raw, mean, std, channel_axis):
    shape = [1] * raw.ndim
    shape[channel_axis] = len(mean)
    mean = np.asarray(mean).reshape(shape)
    std = np.asarray(std).reshape(shape)
    return (raw.astype(np.float64) / 255.0 - mean) / std


def _check_stats(kind, raw, mean, std, axes):
    scaled = raw.astype(np.float64) / 255.0
    observed_mean = scaled.mean(axis=axes)
    observed_std = scaled.std(axis=axes)
    drift = max(np.max(np.abs(observed_mean / np.asarray(mean) - 1.0)),
                np.max(np.abs(observed_std / np.asarray(std) - 1.0)))
    if drift <= STATS_TOLERANCE:
        return
    message = (f"{kind} pixel statistics drift {drift:.2%} from the published constants "
               f"(mean {np.round(observed_mean, 4)}, std {np.round(observed_std, 4)})")
    if len(raw) >= STATS_CHECK_MIN_EXAMPLES:
        raise DataError(message)
    logger.warning(message)


def load_mnist_idx(images_path, labels_path):
    """Parse a pair of big-endian IDX files (optionally gzipped)"""
    images = _read_bytes(images_path)
    labels = _read_bytes(labels_path)
    if len(images) < 16 or len(labels) < 8:
        raise DataError("truncated IDX header")

    magic, count, rows, cols = struct.unpack('>IIII', images[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise DataError(f"{images_path}: bad magic {magic}, expected {MNIST_IMAGE_MAGIC}")
    label_magic, label_count = struct.unpack('>II', labels[:8])
    if label_magic != MNIST_LABEL_MAGIC:
        raise DataError(f"{labels_path}: bad magic {label_magic}, expected {MNIST_LABEL_MAGIC}")
    if count != label_count:
        raise DataError(f"{count} images but {label_count} labels")
    if len(images) != 16 + count * rows * cols:
        raise DataError(f"{images_path}: truncated, expected {16 + count * rows * cols} bytes, got {len(images)}")
    if len(labels) != 8 + count:
        raise DataError(f"{labels_path}: truncated, expected {8 + count} bytes, got {len(labels)}")

    raw = np.frombuffer(images, dtype=np.uint8, offset=16).reshape(count, 1, rows, cols)
    targets = np.frombuffer(labels, dtype=np.uint8, offset=8).astype(np.int64)
    if count and targets.max() >= 10:
        raise DataError(f"{labels_path}: label {targets.max()} out of range")
    _check_stats('mnist', raw, MNIST_MEAN, MNIST_STD, axes=None)

    logger.info(f"Loaded {count} MNIST examples of shape {rows}x{cols}")
    return DatasetHandle('mnist', _standardize(raw, MNIST_MEAN, MNIST_STD, 1), targets, 10, MNIST_MEAN, MNIST_STD)


def _find_mnist(data_dir, split):
    found = []
    for base in MNIST_FILES[split]:
        candidates = []
        for root in (data_dir, os.path.join(data_dir, 'mnist'), os.path.join(data_dir, 'MNIST', 'raw')):
            for name in (base, base.replace('-idx', '.idx')):
                candidates += [os.path.join(root, name), os.path.join(root, name + '.gz')]
        path = next((c for c in candidates if os.path.exists(c)), None)
        if path is None:
            raise DataError(f"MNIST {split} file {base} not found under {data_dir}")
        found.append(path)
    return found


def load_mnist(data_dir=None, split='train', subset=None, seed=0):
    images, labels = _find_mnist(data_dir or settings.DATA_DIR, split)
    handle = load_mnist_idx(images, labels)
    return _cap(handle, subset, seed)


def _parse_cifar_records(path):
    blob = _read_bytes(path)
    if len(blob) == 0 or len(blob) % CIFAR_RECORD:
        raise DataError(f"{path}: length {len(blob)} is not a multiple of {CIFAR_RECORD}")
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise DataError(f"{path}: label {labels.max()} out of range")
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10_bin(directory=None, split='train', subset=None, seed=0):
    """Parse CIFAR-10 binary batches (1 label byte + 3x32x32 pixel bytes per record)"""
    directory = directory or settings.DATA_DIR
    for root in (directory, os.path.join(directory, 'cifar-10-batches-bin')):
        pattern = 'data_batch_*.bin' if split == 'train' else 'test_batch.bin'
        files = sorted(glob.glob(os.path.join(root, pattern)))
        if files:
            break
    else:
        raise DataError(f"No CIFAR-10 {split} batch files under {directory}")

    parts = [_parse_cifar_records(path) for path in files]
    raw = np.concatenate([p[0] for p in parts])
    targets = np.concatenate([p[1] for p in parts])
    _check_stats('cifar10', raw, CIFAR_MEAN, CIFAR_STD, axes=(0, 2, 3))

    logger.info(f"Loaded {len(targets)} CIFAR-10 {split} records from {len(files)} file(s)")
    handle = DatasetHandle('cifar10', _standardize(raw, CIFAR_MEAN, CIFAR_STD, 1), targets, 10, CIFAR_MEAN, CIFAR_STD)
    return _cap(handle, subset, seed)


def _cap(handle, subset, seed):
    if subset is None or subset >= len(handle):
        return handle
    indices = np.sort(np.random.default_rng(seed).choice(len(handle), subset, replace=False))
    logger.info(f"Using a {subset}-example subset of {len(handle)} ({handle.kind})")
    return handle.subset(indices)


def denormalize(handle, x):
    """Invert ingestion back to the raw uint8 pixels"""
    shape = [1] * np.ndim(x)
    shape[-3] = len(handle.mean)
    mean = np.asarray(handle.mean).reshape(shape)
    std = np.asarray(handle.std).reshape(shape)
    return np.rint((np.asarray(x) * std + mean) * 255.0).astype(np.uint8)


def synth_seq_task(vocab, length, count, kind='copy', seed=0):
    """Source sequences over the non-reserved tokens; target is the copy or reversal plus EOS"""
    if vocab < RESERVED_TOKENS + 1 or length < 1 or count < 1:
        raise DataError(f"invalid sequence task sizes: vocab={vocab}, length={length}, count={count}")
    if kind not in ('copy', 'reverse'):
        raise DataError(f"unknown sequence task {kind!r}")
    rng = np.random.default_rng(seed)
    source = rng.integers(RESERVED_TOKENS, vocab, size=(count, length))
    body = source if kind == 'copy' else source[:, ::-1]
    targets = np.concatenate([body, np.full((count, 1), EOS)], axis=1)
    return DatasetHandle('synth-seq', source.astype(np.int64), targets.astype(np.int64), vocab)


def load_dataset(spec, split='train', seed=0):
    """Dispatch on a DatasetSpec"""
    if spec.name == 'mnist':
        return load_mnist(spec.data_dir, split, spec.subset if split == 'train' else spec.test_subset, seed)
    if spec.name == 'cifar10':
        return load_cifar10_bin(spec.data_dir, split, spec.subset if split == 'train' else spec.test_subset, seed)
    # distinct seeds keep the held-out sequences apart from the training ones
    count = spec.train_count if split == 'train' else spec.test_count
    return synth_seq_task(spec.seq_vocab, spec.seq_length, count, spec.seq_kind, seed * 2 + (split != 'train'))


def sample_batch(handle, size, rng):
    """Uniform sample without replacement; advances rng"""
    if size > len(handle):
        raise DataError(f"batch size {size} exceeds {len(handle)} examples")
    return handle.batch(rng.choice(len(handle), size, replace=False))


def iterate_batches(handle, size, rng, shuffle=True):
    """One epoch of batches; the last one may be smaller"""
    order = rng.permutation(len(handle)) if shuffle else np.arange(len(handle))
    for start in range(0, len(order), size):
        yield handle.batch(order[start:start + size])


def augment_batch(batch, rng, pad=4):
    """Random crop from a zero-padded image plus horizontal flip"""
    n, c, h, w = batch.inputs.shape
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=batch.inputs.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = batch.inputs
    out = np.empty_like(batch.inputs)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return Batch(batch.indices, out, batch.targets)
