import textwrap

import pytest
import torch

from stream_poison.checkpoints import CheckpointStore
from stream_poison.data_pre import gen_synthetic
from stream_poison.numcore import Batch, ModelShape, ParamState
from stream_poison.stream import StreamConfig


def random_params(shape, seed, scale=0.5):
    generator = torch.Generator().manual_seed(seed)
    return ParamState(torch.randn(shape.n_params, generator=generator, dtype=torch.float64) * scale, shape)


def random_batch(shape, n, seed, low=0.0, high=1.0):
    generator = torch.Generator().manual_seed(seed + 1000)
    features = low + (high - low) * torch.rand(n, shape.in_dim, generator=generator, dtype=torch.float64)
    labels = torch.randint(0, shape.n_classes, (n,), generator=generator)
    return Batch(features, labels)


@pytest.fixture
def tiny_shape():
    return ModelShape.from_widths([3, 5, 3])


@pytest.fixture
def linear_shape():
    """No hidden layer: smooth everywhere, so finite differences never meet a kink."""
    return ModelShape.from_widths([3, 4])


@pytest.fixture
def tiny_params(tiny_shape):
    return random_params(tiny_shape, seed=0)


@pytest.fixture
def tiny_batch(tiny_shape):
    return random_batch(tiny_shape, n=6, seed=0)


@pytest.fixture
def small_dataset():
    return gen_synthetic('blobs', n=400, d=4, n_classes=4, noise=1.0, seed=0)


@pytest.fixture
def small_stream_cfg():
    return StreamConfig(batch_size=40, burn_in_epochs=4, lr=0.1, momentum=0.9, weight_decay=1e-4, seed=0,
                        aux_epoch=2, victim_batches=3)


@pytest.fixture
def history_store(tiny_shape):
    """Checkpoints 0..5 of a parameter vector drifting away from its start."""
    store = CheckpointStore()
    base = random_params(tiny_shape, seed=3)
    drift = random_params(tiny_shape, seed=4, scale=0.1).values
    for step in range(6):
        store.record(step, ParamState(base.values + step * drift, tiny_shape))
    return store


@pytest.fixture
def write_config(tmp_path):
    def write(body, name='config.yaml'):
        path = tmp_path / name
        path.write_text(textwrap.dedent(body))
        return str(path)
    return write


SMALL_RUN = """
dataset.kind: blobs
dataset.n: 400
dataset.dim: 4
dataset.n_classes: 3
dataset.noise: 1.0
model.hidden: [8]
stream.batch_size: 40
stream.burn_in_epochs: {epochs}
stream.aux_epoch: {aux}
stream.victim_batches: 3
attack.enabled: {attack}
attack.eps: 0.06
attack.step_size: 0.03
attack.n_steps: 2
defense.kind: {defense}
defense.gc_clip_norm: 1.0
output.dir: {out}
seeds: 0..1
"""


@pytest.fixture
def small_run_config(write_config, tmp_path):
    def make(epochs=4, aux=2, attack='false', defense='ST', extra='', name='config.yaml'):
        out = tmp_path / 'out'
        body = SMALL_RUN.format(epochs=epochs, aux=aux, attack=attack, defense=defense, out=out) + extra
        return write_config(body, name), out
    return make
