"""Historical parameter snapshots backing the interval models and the fixed auxiliary model."""
import logging
import os
import re
import struct
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import torch

from .errors import CheckpointLookupError, ContractViolation
from .numcore import DTYPE, ModelShape, ParamState

logger = logging.getLogger(__name__)

MAGIC = b'SPCKPT01'
FILE_PATTERN = re.compile(r'^ckpt_(\d+)\.bin$')


@dataclass(frozen=True)
class Checkpoint:
    step_id: int
    params: ParamState


class CheckpointStore:
    """Ordered snapshots with strictly increasing ids.

    When full, the oldest entry that is not the auxiliary one is evicted. Snapshots are
    copied in on record and copied out on fetch.
    """

    def __init__(self, capacity=None, auxiliary_id=None):
        if capacity is not None:
            capacity = int(capacity)
            if capacity < 1:
                raise ContractViolation('capacity must be positive, got {}'.format(capacity))
            if auxiliary_id is not None and capacity < 2:
                raise ContractViolation('a pinned auxiliary checkpoint needs capacity >= 2')
        self.capacity = capacity
        self.auxiliary_id = None if auxiliary_id is None else int(auxiliary_id)
        self._entries = OrderedDict()

    def __len__(self):
        return len(self._entries)

    def __contains__(self, step_id):
        return int(step_id) in self._entries

    @property
    def ids(self):
        return list(self._entries)

    @property
    def newest(self):
        if not self._entries:
            raise CheckpointLookupError('store is empty')
        return next(reversed(self._entries))

    def record(self, step_id, params):
        step_id = int(step_id)
        if step_id < 0:
            raise ContractViolation('step_id must be non-negative, got {}'.format(step_id))
        if self._entries and step_id <= self.newest:
            raise ContractViolation('step_id {} is not greater than the last recorded id {}'.format(
                step_id, self.newest))
        self._entries[step_id] = params.copy()
        while self.capacity is not None and len(self._entries) > self.capacity:
            victim = next(i for i in self._entries if i != self.auxiliary_id)
            del self._entries[victim]
            logger.debug('evicted checkpoint %d', victim)
        return self

    def fetch(self, by_id=None, back_k=None, anchor=None):
        """Resolve a checkpoint by id, or k recorded entries before ``anchor`` (default: newest)."""
        if (by_id is None) == (back_k is None):
            raise ContractViolation('fetch needs exactly one of by_id / back_k')
        if by_id is not None:
            by_id = int(by_id)
            if by_id not in self._entries:
                raise CheckpointLookupError('no checkpoint with id {}'.format(by_id))
            return Checkpoint(by_id, self._entries[by_id].copy())

        ids = self.ids
        if anchor is None:
            if not ids:
                raise CheckpointLookupError('no checkpoint for back_k={}: store is empty'.format(back_k))
            position = len(ids) - 1
        else:
            if int(anchor) not in self._entries:
                raise CheckpointLookupError('no anchor checkpoint with id {}'.format(anchor))
            position = ids.index(int(anchor))
        target = position - int(back_k)
        if back_k < 0 or target < 0:
            raise CheckpointLookupError('no checkpoint for back_k={} (anchor {}, {} entries)'.format(
                back_k, ids[position] if ids else None, len(ids)))
        step_id = ids[target]
        return Checkpoint(step_id, self._entries[step_id].copy())

    def auxiliary(self):
        if self.auxiliary_id is None:
            raise CheckpointLookupError('store has no auxiliary checkpoint id')
        return self.fetch(by_id=self.auxiliary_id)


def checkpoint_filename(step_id):
    return 'ckpt_{}.bin'.format(int(step_id))


def save_checkpoint(checkpoint, path):
    shape = checkpoint.params.shape
    values = checkpoint.params.values.detach().cpu().numpy().astype('<f8', copy=False)
    with open(path, 'wb') as f:
        f.write(MAGIC)
        f.write(struct.pack('<I', len(shape.layer_dims)))
        for fan_in, fan_out in shape.layer_dims:
            f.write(struct.pack('<II', fan_in, fan_out))
        f.write(struct.pack('<QQ', checkpoint.step_id, values.size))
        f.write(values.tobytes())


def _unpack(fmt, data, offset, path):
    if len(data) < offset + struct.calcsize(fmt):
        raise ContractViolation('{}: truncated checkpoint header ({} bytes)'.format(path, len(data)))
    return struct.unpack_from(fmt, data, offset)


def load_checkpoint(path):
    with open(path, 'rb') as f:
        data = f.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ContractViolation('{} is not a checkpoint file (bad magic)'.format(path))
    offset = len(MAGIC)
    (n_layers,) = _unpack('<I', data, offset, path)
    offset += 4
    dims = []
    for _ in range(n_layers):
        dims.append(_unpack('<II', data, offset, path))
        offset += 8
    step_id, count = _unpack('<QQ', data, offset, path)
    offset += 16
    if len(data) - offset != 8 * count:
        raise ContractViolation('{}: expected {} values, found {} bytes'.format(path, count, len(data) - offset))
    values = np.frombuffer(data, dtype='<f8', count=count, offset=offset)
    params = ParamState(torch.tensor(values.astype(np.float64), dtype=DTYPE), ModelShape(tuple(dims)))
    return Checkpoint(int(step_id), params)


def save_store(store, directory):
    os.makedirs(directory, exist_ok=True)
    for step_id in store.ids:
        save_checkpoint(store.fetch(by_id=step_id), os.path.join(directory, checkpoint_filename(step_id)))
    logger.info('saved {} checkpoints to {}'.format(len(store), directory))


def load_store(directory, capacity=None, auxiliary_id=None):
    if not os.path.isdir(directory):
        raise CheckpointLookupError('checkpoint directory {} does not exist'.format(directory))
    found = sorted((int(m.group(1)), name) for name in os.listdir(directory)
                   for m in [FILE_PATTERN.match(name)] if m)
    if not found:
        raise CheckpointLookupError('no checkpoints in {}'.format(directory))
    store = CheckpointStore(capacity=capacity, auxiliary_id=auxiliary_id)
    for step_id, name in found:
        checkpoint = load_checkpoint(os.path.join(directory, name))
        if checkpoint.step_id != step_id:
            raise ContractViolation('{} holds step_id {}'.format(name, checkpoint.step_id))
        store.record(step_id, checkpoint.params)
    return store
