"""Two-phase streaming simulation: clean burn-in, then a victim phase where the attacker supplies
batches and the configured defense sits in front of every SGD update."""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import torch
from timm.utils import AverageMeter
from tqdm import tqdm

from .attack import run_attack_phase
from .defense import DefenseConfig, DefenseContext, apply_defense
from .discrepancy import Measure, memorization_discrepancy
from .errors import ConfigError, ContractViolation, NumericalError
from .numcore import Batch, cross_entropy_loss, forward_logits, grad_params, init_params, sgd_step
from .utils import component_seeds

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ['run_id', 'seed', 'defense_kind', 'acc_start', 'n_poison_batches', 'acc_post_poison',
                   'acc_post_trigger', 'delta', 'trigger_outcome']


@dataclass(frozen=True)
class StreamConfig:
    batch_size: int = 100
    burn_in_epochs: int = 40
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    aux_epoch: Optional[int] = None
    schedule_epochs: int = 1
    victim_batches: int = 100
    # 0 keeps no victim-phase checkpoints, n keeps one after every n-th victim batch
    victim_checkpoint_every: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError('stream.batch_size must be >= 1, got {}'.format(self.batch_size))
        if self.burn_in_epochs < 0:
            raise ConfigError('stream.burn_in_epochs must be >= 0, got {}'.format(self.burn_in_epochs))
        if not self.lr > 0:
            raise ConfigError('stream.lr must be > 0, got {}'.format(self.lr))
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError('stream.momentum and stream.weight_decay must be >= 0')
        if not 0 <= self.aux_checkpoint <= self.burn_in_epochs:
            raise ConfigError('stream.aux_epoch must lie in [0, {}], got {}'.format(
                self.burn_in_epochs, self.aux_epoch))
        if self.schedule_epochs < 1:
            raise ConfigError('stream.schedule_epochs must be >= 1, got {}'.format(self.schedule_epochs))
        if self.victim_batches < 0:
            raise ConfigError('stream.victim_batches must be >= 0, got {}'.format(self.victim_batches))
        if self.victim_checkpoint_every < 0:
            raise ConfigError('stream.victim_checkpoint_every must be >= 0, got {}'.format(
                self.victim_checkpoint_every))

    @property
    def aux_checkpoint(self):
        """Auxiliary checkpoint id; defaults to the middle of burn-in."""
        return self.burn_in_epochs // 2 if self.aux_epoch is None else self.aux_epoch


@dataclass
class MetricsRow:
    run_id: str
    seed: int
    defense_kind: str
    acc_start: float
    n_poison_batches: Optional[int] = None
    acc_post_poison: Optional[float] = None
    acc_post_trigger: Optional[float] = None
    delta: Optional[float] = None
    trigger_outcome: Optional[str] = None

    def as_dict(self):
        return {name: getattr(self, name) for name in METRICS_COLUMNS}


def evaluate_accuracy(shape, params, split):
    """Argmax accuracy; ties go to the lowest class index."""
    if len(split) == 0:
        raise ContractViolation('cannot evaluate accuracy on an empty split')
    predictions = forward_logits(shape, params, split.features).argmax(dim=1)
    return (predictions == split.labels).double().mean().item()


class StreamTrainer:
    """Online SGD over a reshuffled training split, with the defense in front of submitted batches."""

    def __init__(self, dataset, shape, cfg, store, params, shuffle_seed, defense_cfg=None):
        self.dataset = dataset
        self.shape = shape
        self.cfg = cfg
        self.store = store
        self.params = params
        self.momentum_buffer = torch.zeros_like(params.values)
        self.train_split = dataset.split('train')
        self.val_batch = dataset.split('val')
        self.test_batch = dataset.split('test')
        if cfg.batch_size > len(self.train_split):
            raise ConfigError('stream.batch_size {} exceeds the training split ({} samples)'.format(
                cfg.batch_size, len(self.train_split)))
        self.batches_per_epoch = len(self.train_split) // cfg.batch_size
        self.defense_cfg = defense_cfg or DefenseConfig()
        self.context = DefenseContext(shape, params)
        self.reference_loss = None
        self._generator = torch.Generator().manual_seed(int(shuffle_seed))
        self._order = torch.empty(0, dtype=torch.long)
        self._cursor = 0
        self.epoch = 0
        self.victim_step = 0

    @property
    def aux_params(self):
        return self.context.aux_params

    @aux_params.setter
    def aux_params(self, value):
        self.context.aux_params = value

    def next_batch(self):
        """Next clean batch of the stream; the trailing partial batch of an epoch is dropped."""
        bs = self.cfg.batch_size
        if self._cursor + bs > self._order.numel():
            self._order = torch.randperm(len(self.train_split), generator=self._generator)
            self._cursor = 0
            self.epoch += 1
        index = self._order[self._cursor:self._cursor + bs]
        self._cursor += bs
        return Batch(self.train_split.features[index], self.train_split.labels[index])

    def _update(self, grad, where):
        try:
            self.params, self.momentum_buffer = sgd_step(self.params, grad, self.cfg.lr, self.momentum_buffer,
                                                         self.cfg.momentum, self.cfg.weight_decay)
        except NumericalError as exc:
            raise NumericalError('{} at {}'.format(exc, where)) from exc

    def train_step(self, batch, where=''):
        loss = cross_entropy_loss(self.shape, self.params, batch)
        if not math.isfinite(loss):
            raise NumericalError('non-finite training loss at {}'.format(where))
        self._update(grad_params(self.shape, self.params, batch), where)
        return loss

    def submit(self, batch):
        """Defended SGD step on an incoming batch; returns the training loss of the batch actually used."""
        self.context.params = self.params
        self.context.batch_index = self.victim_step
        used, grad = apply_defense(self.defense_cfg, batch, lambda b: grad_params(self.shape, self.params, b),
                                   self.context)
        where = 'victim batch {}'.format(self.victim_step)
        loss = cross_entropy_loss(self.shape, self.params, used)
        if not math.isfinite(loss):
            raise NumericalError('non-finite training loss at {}'.format(where))
        self._update(grad, where)
        self.victim_step += 1
        every = self.cfg.victim_checkpoint_every
        if every and self.victim_step % every == 0:
            self.store.record(self.store.newest + 1, self.params)
        return loss

    def heldout_loss(self):
        return cross_entropy_loss(self.shape, self.params, self.val_batch)

    def evaluate(self):
        return evaluate_accuracy(self.shape, self.params, self.test_batch)


@dataclass
class BurnInResult:
    params: object
    reference_loss: float
    md_series: list
    momentum_buffer: torch.Tensor = field(repr=False)
    trainer: StreamTrainer = field(repr=False)


def burn_in(dataset, shape, cfg, store, measure=Measure.KL, progress=False):
    """Clean training for cfg.burn_in_epochs epochs with one checkpoint per epoch (id 0 is the init).

    Over the last cfg.schedule_epochs epochs (after the auxiliary checkpoint exists) every incoming
    batch contributes one (m, mean discrepancy vs auxiliary) point, with m counted backwards from
    the end of burn-in so that the first victim batch is m = 0.
    """
    seeds = component_seeds(cfg.seed)
    params = init_params(shape, seeds['init'])
    if store.auxiliary_id is None:
        store.auxiliary_id = cfg.aux_checkpoint
    store.record(0, params)
    trainer = StreamTrainer(dataset, shape, cfg, store, params, shuffle_seed=seeds['shuffle'])
    aux_id = cfg.aux_checkpoint
    window_start = cfg.burn_in_epochs - cfg.schedule_epochs

    md_means = []
    reference_loss = None
    with tqdm(range(1, cfg.burn_in_epochs + 1), desc='burn-in', disable=not progress) as loop:
        for epoch in loop:
            meter = AverageMeter()
            aux_params = store.fetch(by_id=aux_id).params if epoch > max(aux_id, window_start) else None
            for index in range(trainer.batches_per_epoch):
                batch = trainer.next_batch()
                if aux_params is not None:
                    md_means.append(memorization_discrepancy(shape, trainer.params, aux_params, batch.features,
                                                             measure).mean)
                loss = trainer.train_step(batch, where='epoch {} batch {}'.format(epoch, index))
                meter.update(loss, len(batch))
            store.record(epoch, trainer.params)
            reference_loss = meter.avg
            loop.set_postfix(loss=meter.avg)
            logger.info('burn_in_epoch{}_loss_{:.6f}'.format(epoch, meter.avg))

    if reference_loss is None:
        reference_loss = cross_entropy_loss(shape, trainer.params, trainer.train_split)
    if aux_id in store:
        trainer.aux_params = store.fetch(by_id=aux_id).params
    trainer.reference_loss = reference_loss
    md_series = [(i - len(md_means), value) for i, value in enumerate(md_means)]
    return BurnInResult(trainer.params, reference_loss, md_series, trainer.momentum_buffer, trainer)


def victim_phase(burn, dataset, attack_cfg, defense_cfg, cfg, store, max_batches, run_id='run', progress=False):
    """Stream max_batches incoming batches through the defense and report accuracies.

    With ``attack_cfg=None`` the stream stays clean (clean oracle): the poison and trigger
    accuracies both equal the final accuracy and delta is left empty. Continues the trainer
    held by ``burn``.
    """
    trainer = burn.trainer
    trainer.defense_cfg = defense_cfg
    if defense_cfg.aux_checkpoint_id is not None:
        trainer.aux_params = store.fetch(by_id=defense_cfg.aux_checkpoint_id).params
    if trainer.aux_params is None and (defense_cfg.kind.uses_discrepancy or
                                       (attack_cfg is not None and attack_cfg.beta > 0)):
        trainer.aux_params = store.auxiliary().params

    acc_start = trainer.evaluate()
    row = MetricsRow(run_id=run_id, seed=cfg.seed, defense_kind=defense_cfg.kind.value, acc_start=acc_start)
    logger.info('victim_start_{}_acc_{:.4f}'.format(defense_cfg.kind.value, acc_start))

    if attack_cfg is None:
        with tqdm(range(max_batches), desc='clean stream', disable=not progress) as loop:
            for _ in loop:
                loop.set_postfix(loss=trainer.submit(trainer.next_batch()))
        row.acc_post_poison = row.acc_post_trigger = trainer.evaluate()
    else:
        snapshot = {}

        def before_trigger():
            snapshot['acc'] = trainer.evaluate()

        row.n_poison_batches, outcome = run_attack_phase(trainer, attack_cfg, max_batches,
                                                         before_trigger=before_trigger, progress=progress)
        row.acc_post_poison = snapshot['acc']
        row.acc_post_trigger = trainer.evaluate()
        row.delta = row.acc_post_trigger - row.acc_post_poison
        row.trigger_outcome = outcome.value

    stats = trainer.context.stats
    logger.info('victim_{}_batches_{}_corrected_{:.4f}_mean_steps_{:.3f}_clipped_{}'.format(
        defense_cfg.kind.value, stats.batches, stats.corrected_fraction, stats.mean_steps, stats.clipped))
    logger.info('victim_end_acc_post_poison_{:.4f}_acc_post_trigger_{:.4f}'.format(
        row.acc_post_poison, row.acc_post_trigger))
    return row
