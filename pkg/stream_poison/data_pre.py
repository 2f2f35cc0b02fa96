import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.datasets import make_blobs, make_circles, make_moons
from sklearn.model_selection import train_test_split

from .errors import ConfigError, ContractViolation
from .numcore import DTYPE, Batch

logger = logging.getLogger(__name__)

KINDS = ('blobs', 'moons', 'rings')
SPLITS = ('train', 'val', 'test')
OOD_SHIFTS = ('mean', 'uniform')

IDX_TYPES = {0x08: np.dtype('>u1'), 0x0D: np.dtype('>f4'), 0x0E: np.dtype('>f8')}


@dataclass
class Dataset:
    features: torch.Tensor = field(repr=False)
    labels: torch.Tensor = field(repr=False)
    splits: dict = field(repr=False)
    recipe: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = torch.as_tensor(self.features, dtype=DTYPE)
        self.labels = torch.as_tensor(self.labels, dtype=torch.long)
        seen = set()
        for name in SPLITS:
            index = self.splits[name]
            overlap = seen.intersection(index.tolist())
            assert not overlap, 'split {} overlaps earlier splits'.format(name)
            seen.update(index.tolist())

    @property
    def in_dim(self):
        return self.features.shape[1]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1

    def split(self, name):
        index = self.splits[name]
        if index.numel() == 0:
            raise ContractViolation('split {!r} is empty'.format(name))
        return Batch(self.features[index], self.labels[index])


def _rescale(x, lo, hi):
    return np.clip((x - lo) / (hi - lo), 0.0, 1.0)


def stratified_split(labels, seed, val_fraction=0.1, test_fraction=0.1):
    index = np.arange(len(labels))
    train, rest = train_test_split(index, test_size=val_fraction + test_fraction, stratify=labels,
                                   random_state=seed)
    val, test = train_test_split(rest, test_size=test_fraction / (val_fraction + test_fraction),
                                 stratify=labels[rest], random_state=seed)
    return {name: torch.as_tensor(np.sort(part), dtype=torch.long)
            for name, part in zip(SPLITS, (train, val, test))}


def _generate(kind, n, d, n_classes, noise, seed, centers=None):
    if kind == 'blobs':
        return make_blobs(n_samples=n, n_features=d, centers=n_classes if centers is None else centers,
                          cluster_std=noise, random_state=seed, return_centers=True)
    if kind == 'moons':
        x, y = make_moons(n_samples=n, noise=noise, random_state=seed)
    else:
        x, y = make_circles(n_samples=n, noise=noise, factor=0.5, random_state=seed)
    return x, y, None


def gen_synthetic(kind, n, d, n_classes, noise, seed):
    """Seeded toy classification data, rescaled into [0, 1] with one global affine map,
    then split 80/10/10 with per-class stratification."""
    if kind not in KINDS:
        raise ConfigError('dataset.kind: unknown kind {!r} (expected one of {})'.format(kind, ', '.join(KINDS)))
    if kind in ('moons', 'rings') and (d != 2 or n_classes != 2):
        raise ConfigError('dataset.kind={} needs dim=2 and n_classes=2, got dim={} n_classes={}'.format(
            kind, d, n_classes))
    if n < 10 * n_classes:
        raise ConfigError('dataset.n={} is too small for {} classes'.format(n, n_classes))

    x, y, centers = _generate(kind, n, d, n_classes, noise, seed)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        raise ContractViolation('generated features are constant; cannot rescale')
    recipe = {'kind': kind, 'n': n, 'd': d, 'n_classes': n_classes, 'noise': noise, 'seed': seed,
              'lo': lo, 'hi': hi, 'centers': centers}
    dataset = Dataset(_rescale(x, lo, hi), y, stratified_split(y, seed), recipe)
    logger.info('dataset_{}_n{}_d{}_c{}_train{}_val{}_test{}'.format(
        kind, n, d, n_classes, *(dataset.splits[s].numel() for s in SPLITS)))
    return dataset


def gen_ood(base, shift_kind, magnitude, seed, n=None):
    """Fresh draws from the base generator, moved off-distribution.

    ``mean`` adds ``magnitude`` along a random unit direction; ``uniform`` blends each row towards
    uniform noise with weight ``magnitude`` (clipped to 1). Features are clamped to [0, 1].
    """
    if magnitude < 0:
        raise ContractViolation('ood magnitude must be >= 0, got {}'.format(magnitude))
    if shift_kind not in OOD_SHIFTS:
        raise ConfigError('analysis.ood_shift: unknown shift {!r} (expected one of {})'.format(
            shift_kind, ', '.join(OOD_SHIFTS)))
    recipe = base.recipe
    if recipe.get('kind') not in KINDS:
        raise ContractViolation('gen_ood needs a synthetic base dataset, got kind {!r}'.format(recipe.get('kind')))
    n = int(n or base.splits['test'].numel())
    x, y, _ = _generate(recipe['kind'], n, recipe['d'], recipe['n_classes'], recipe['noise'], seed,
                        centers=recipe['centers'])
    x = _rescale(x, recipe['lo'], recipe['hi'])
    rng = np.random.default_rng(seed)
    if shift_kind == 'mean':
        direction = rng.standard_normal(x.shape[1])
        x = x + magnitude * direction / np.linalg.norm(direction)
    else:
        weight = min(float(magnitude), 1.0)
        x = (1 - weight) * x + weight * rng.uniform(size=x.shape)
    return Batch(torch.as_tensor(np.clip(x, 0.0, 1.0), dtype=DTYPE), torch.as_tensor(y, dtype=torch.long))


def load_idx(path, rescale=True):
    """Read an IDX file; unsigned-byte payloads are mapped to [0, 1] unless ``rescale`` is False."""
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < 4:
        raise ContractViolation('{}: truncated IDX header ({} bytes)'.format(path, len(data)))
    zero, type_code, n_dims = struct.unpack_from('>HBB', data, 0)
    if zero != 0 or type_code not in IDX_TYPES:
        raise ContractViolation('{} is not a supported IDX file (type 0x{:02X})'.format(path, type_code))
    offset = 4 + 4 * n_dims
    if len(data) < offset:
        raise ContractViolation('{}: truncated IDX header ({} bytes)'.format(path, len(data)))
    dims = struct.unpack_from('>{}I'.format(n_dims), data, 4)
    dtype = IDX_TYPES[type_code]
    count = int(np.prod(dims)) if dims else 1
    if len(data) - offset != count * np.dtype(dtype).itemsize:
        raise ContractViolation('{}: expected {} values, found {} payload bytes'.format(
            path, count, len(data) - offset))
    array = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(dims)
    if type_code == 0x08:
        return torch.as_tensor(array / 255.0 if rescale else array.astype(np.int64))
    return torch.as_tensor(array.astype(np.float64))


def save_idx(path, array):
    """Write unsigned-byte IDX for integer arrays and double IDX for everything else."""
    array = np.asarray(array)
    if np.issubdtype(array.dtype, np.integer):
        if array.min() < 0 or array.max() > 255:
            raise ContractViolation('integer IDX payloads must fit in an unsigned byte')
        type_code = 0x08
    else:
        type_code = 0x0E
    with open(path, 'wb') as f:
        f.write(struct.pack('>HBB', 0, type_code, array.ndim))
        f.write(struct.pack('>{}I'.format(array.ndim), *array.shape))
        f.write(np.ascontiguousarray(array, dtype=IDX_TYPES[type_code]).tobytes())


def load_idx_dataset(features_path, labels_path, seed):
    features = load_idx(features_path)
    features = features.reshape(features.shape[0], -1).to(DTYPE)
    labels = load_idx(labels_path, rescale=False).reshape(-1).long()
    if features.shape[0] != labels.shape[0]:
        raise ContractViolation('{} feature rows but {} labels'.format(features.shape[0], labels.shape[0]))
    return Dataset(features, labels, stratified_split(labels.numpy(), seed), {'kind': 'idx', 'seed': seed})


def save_dataset_idx(dataset, features_path, labels_path):
    save_idx(features_path, dataset.features.numpy())
    save_idx(labels_path, dataset.labels.numpy().astype(np.uint8))
