import gzip
import os
import struct

import numpy as np
import pytest

from config.settings import settings
from src.autodiff import Tensor
from src.data import Batch, DatasetHandle
from src.nn import Model, ParamBlock
from src.architectures import ArchSpec, build_model


@pytest.fixture(autouse=True)
def test_settings(tmp_path):
    # Point every artifact directory at the test's tmp dir
    saved = (settings.DATA_DIR, settings.OUTPUT_DIR, settings.LOG_DIR, settings.SHOW_PROGRESS, settings.MAX_WORKERS)
    settings.DATA_DIR = str(tmp_path / 'raw')
    settings.OUTPUT_DIR = str(tmp_path / 'runs')
    settings.LOG_DIR = str(tmp_path / 'logs')
    settings.SHOW_PROGRESS = False
    settings.MAX_WORKERS = 2
    yield settings
    settings.DATA_DIR, settings.OUTPUT_DIR, settings.LOG_DIR, settings.SHOW_PROGRESS, settings.MAX_WORKERS = saved


class QuadraticNet:
    """L(theta) = sum_k c_k * theta_k^2 / 2 over scalar blocks"""

    def __init__(self, weights, curvature=None):
        self.curvature = curvature or [1.0] * len(weights)
        self.blocks = [ParamBlock(f"theta{i}", Tensor(np.array(float(w))), 'fc-weight', 1, 1)
                       for i, w in enumerate(weights)]

    def param_blocks(self):
        return self.blocks

    def __call__(self, params, batch, ctx):
        return [params[b.name] for b in self.blocks]

    def loss(self, thetas, batch):
        total = None
        for c, theta in zip(self.curvature, thetas):
            term = theta * theta * (0.5 * c)
            total = term if total is None else total + term
        return total


def quadratic_batch(size=1):
    return Batch(np.arange(size), np.zeros((size, 1)), np.zeros(size, dtype=np.int64))


@pytest.fixture
def quadratic_model():
    """Scalar toy model L = theta^2 / 2 with W = 2"""
    return Model(QuadraticNet([2.0]))


@pytest.fixture
def two_block_quadratic():
    """L = (theta0^2 + 3 theta1^2) / 2; the normalized SGD image depends on the scales"""
    return Model(QuadraticNet([2.0, 1.0], [1.0, 3.0]))


@pytest.fixture
def toy_dataset():
    """Linearly separable-ish 3-class Gaussian blobs in 5 dims"""
    rng = np.random.default_rng(0)
    targets = rng.integers(0, 3, 600)
    centers = rng.normal(0.0, 2.0, (3, 5))
    inputs = centers[targets] + rng.normal(0.0, 1.0, (600, 5))
    return DatasetHandle('toy', inputs, targets.astype(np.int64), 3)


@pytest.fixture
def small_mlp():
    return build_model(ArchSpec(kind='mlp', widths=[5, 16, 16, 3]), seed=0)


def write_idx(directory, split, count, seed=0, gz=False):
    """Write a synthetic MNIST split in IDX format; returns (images, labels)"""
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (count, 28, 28), dtype=np.uint8)
    labels = rng.integers(0, 10, count, dtype=np.uint8)
    names = {'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
             'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte')}[split]
    os.makedirs(directory, exist_ok=True)
    opener = gzip.open if gz else open
    suffix = '.gz' if gz else ''
    with opener(os.path.join(directory, names[0] + suffix), 'wb') as f:
        f.write(struct.pack('>IIII', 2051, count, 28, 28) + images.tobytes())
    with opener(os.path.join(directory, names[1] + suffix), 'wb') as f:
        f.write(struct.pack('>II', 2049, count) + labels.tobytes())
    return images, labels


def write_cifar(directory, name, count, seed=0):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, count, dtype=np.uint8)
    pixels = rng.integers(0, 256, (count, 3072), dtype=np.uint8)
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, name), 'wb') as f:
        f.write(np.concatenate([labels[:, None], pixels], axis=1).tobytes())
    return pixels.reshape(count, 3, 32, 32), labels


@pytest.fixture
def mnist_dir(tmp_path):
    directory = str(tmp_path / 'mnist')
    write_idx(directory, 'train', 256, seed=1)
    write_idx(directory, 'test', 64, seed=2)
    return directory


@pytest.fixture
def cifar_dir(tmp_path):
    directory = str(tmp_path / 'cifar')
    write_cifar(directory, 'data_batch_1.bin', 40, seed=1)
    write_cifar(directory, 'data_batch_2.bin', 24, seed=2)
    write_cifar(directory, 'test_batch.bin', 16, seed=3)
    return directory


def real_data_dir():
    return os.environ.get('DATA_DIR', 'data/raw/')


def has_mnist(directory):
    for root in (directory, os.path.join(directory, 'mnist'), os.path.join(directory, 'MNIST', 'raw')):
        for name in ('train-images-idx3-ubyte', 'train-images-idx3-ubyte.gz', 'train-images.idx3-ubyte'):
            if os.path.exists(os.path.join(root, name)):
                return True
    return False


def has_cifar(directory):
    return any(os.path.exists(os.path.join(root, 'data_batch_1.bin'))
               for root in (directory, os.path.join(directory, 'cifar-10-batches-bin')))


@pytest.fixture
def quad_batch():
    return quadratic_batch()


@pytest.fixture
def idx_writer():
    return write_idx


@pytest.fixture
def cifar_writer():
    return write_cifar


@pytest.fixture
def real_mnist():
    directory = real_data_dir()
    if not has_mnist(directory):
        pytest.skip(f"MNIST files not found under {directory}")
    return directory


@pytest.fixture
def real_cifar():
    directory = real_data_dir()
    if not has_cifar(directory):
        pytest.skip(f"CIFAR-10 binary batches not found under {directory}")
    return directory


@pytest.fixture
def make_quadratic():
    def make(weights, curvature=None):
        return Model(QuadraticNet(weights, curvature))
    return make
