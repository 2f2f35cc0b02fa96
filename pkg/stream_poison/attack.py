"""Poison crafting: plain PGD, the trigger batch, accumulative batches with the meta-gradient term,
the discrepancy-aware (adaptive) variant, and the loss monitor that decides when to trigger."""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional

import torch
from tqdm import tqdm

from .discrepancy import Measure, md_grad_input
from .errors import ConfigError, ContractViolation, NumericalError
from .numcore import Batch, fd_hvp, fd_mixed_grad_input, grad_input, grad_params

logger = logging.getLogger(__name__)

MAXIMIZE = 'maximize_loss'
MINIMIZE = 'minimize_loss'
MONITOR_SOURCES = ('batch', 'heldout')
ZERO_NORM = 1e-15


@dataclass(frozen=True)
class AttackConfig:
    eps: float = 0.06
    step_size: float = 0.015
    n_steps: int = 10
    lam: float = 1.0
    beta: float = 0.0
    surrogate_step: Optional[int] = None
    eps_fd: Optional[float] = None
    monitor_gamma: float = 1.5
    monitor_source: str = 'batch'
    measure: Measure = Measure.KL

    def __post_init__(self):
        object.__setattr__(self, 'measure', Measure.parse(self.measure))
        if self.eps < 0:
            raise ConfigError('attack.eps must be >= 0, got {}'.format(self.eps))
        if self.eps > 0 and not 0 < self.step_size <= self.eps:
            raise ConfigError('attack.step_size must lie in (0, eps={}], got {}'.format(self.eps, self.step_size))
        if self.n_steps < 0:
            raise ConfigError('attack.n_steps must be >= 0, got {}'.format(self.n_steps))
        if self.lam < 0:
            raise ConfigError('attack.lambda must be >= 0, got {}'.format(self.lam))
        if self.beta < 0:
            raise ConfigError('attack.beta must be >= 0, got {}'.format(self.beta))
        if not self.monitor_gamma > 1:
            raise ConfigError('attack.monitor_gamma must be > 1, got {}'.format(self.monitor_gamma))
        if self.monitor_source not in MONITOR_SOURCES:
            raise ConfigError('attack.monitor_source must be one of {}, got {!r}'.format(
                MONITOR_SOURCES, self.monitor_source))
        if self.eps_fd is not None and not self.eps_fd > 0:
            raise ConfigError('attack.eps_fd must be > 0, got {}'.format(self.eps_fd))

    @property
    def inert(self):
        return self.eps == 0 or self.n_steps == 0


@dataclass(frozen=True)
class MonitorState:
    reference_loss: float
    current_loss: Optional[float] = None
    triggered: bool = False

    def __post_init__(self):
        if not self.reference_loss > 0:
            raise ContractViolation('monitor reference loss must be > 0, got {}'.format(self.reference_loss))


class TriggerOutcome(str, Enum):
    TRIGGERED = 'triggered'
    EXHAUSTED = 'exhausted'


def project_step(x, x0, direction, signed_step, eps):
    """One signed step followed by projection onto the l-inf ball around x0 and the unit box."""
    x = x + signed_step * torch.sign(direction)
    x = torch.min(torch.max(x, x0 - eps), x0 + eps)
    return x.clamp(0.0, 1.0)


def _check_finite(tensor, what, step):
    if not torch.isfinite(tensor).all():
        raise NumericalError('{} became non-finite at PGD step {}'.format(what, step))


def pgd_perturb(batch, shape, params, eps, step_size, n_steps, mode=MAXIMIZE):
    if mode not in (MAXIMIZE, MINIMIZE):
        raise ContractViolation('unknown PGD mode {!r}'.format(mode))
    if eps == 0 or n_steps == 0:
        return batch
    signed_step = step_size if mode == MAXIMIZE else -step_size
    x0 = batch.features
    x = x0.clone()
    for _ in range(int(n_steps)):
        x = project_step(x, x0, grad_input(shape, params, x, batch.labels), signed_step, eps)
    return batch.with_features(x)


def _generator_params(params, cfg, store):
    if cfg.surrogate_step is None:
        return params
    if store is None:
        raise ContractViolation('black-box mode needs a checkpoint store for surrogate {}'.format(cfg.surrogate_step))
    return store.fetch(by_id=cfg.surrogate_step).params


def trigger_objective(shape, params, features, labels, u):
    return torch.dot(grad_params(shape, params, Batch(features, labels)), u).item()


def trigger_direction(shape, params, features, labels, u, eps_fd=None):
    """Sign pattern of one descent step on grad_params(x) . u."""
    return -torch.sign(fd_mixed_grad_input(shape, params, features, labels, u, eps_fd))


def craft_trigger(trigger_batch, shape, params, val_batch, cfg, store=None):
    """Descend grad_params(trigger)^T grad_params(val) by sign steps.

    Sign steps on this objective are not monotone, so the iterate with the lowest objective is
    returned (the clean batch included); the result never scores above the unperturbed batch.
    """
    if cfg.inert:
        return trigger_batch
    params = _generator_params(params, cfg, store)
    u = grad_params(shape, params, val_batch)
    _check_finite(u, 'validation gradient', 0)
    x0, labels = trigger_batch.features, trigger_batch.labels
    x = x0.clone()
    best_x, best_j = x0, trigger_objective(shape, params, x0, labels, u)
    for step in range(cfg.n_steps):
        direction = fd_mixed_grad_input(shape, params, x, labels, u, cfg.eps_fd)
        _check_finite(direction, 'trigger meta-gradient', step)
        x = project_step(x, x0, direction, -cfg.step_size, cfg.eps)
        j = trigger_objective(shape, params, x, labels, u)
        if j < best_j:
            best_x, best_j = x, j
    logger.debug('trigger_objective_{:.6g}'.format(best_j))
    return trigger_batch.with_features(best_x)


def meta_gradient(shape, params, val_batch, trigger_batch, eps_fd=None):
    """grad_theta of g_val^T g_trig by the product rule: H_val g_trig + H_trig g_val."""
    g_val = grad_params(shape, params, val_batch)
    g_trig = grad_params(shape, params, trigger_batch)
    v = torch.zeros_like(g_val)
    if torch.linalg.vector_norm(g_trig).item() > ZERO_NORM:
        v = v + fd_hvp(shape, params, val_batch, g_trig, eps_fd)
    if torch.linalg.vector_norm(g_val).item() > ZERO_NORM:
        v = v + fd_hvp(shape, params, trigger_batch, g_val, eps_fd)
    return v


def accumulative_perturb(stream_batch, shape, params, val_batch, trigger_batch, cfg, aux_params=None, store=None):
    """Ascend grad_params(x)^T (g_clean + lam * v), minus beta times the discrepancy gradient.

    g_clean is the parameter gradient at the current iterate x, re-evaluated every PGD step; v depends
    on the clean validation and trigger batches only and is evaluated once.
    """
    if cfg.beta > 0 and aux_params is None:
        raise ContractViolation('an adaptive attack (beta > 0) needs the auxiliary parameters')
    if cfg.inert:
        return stream_batch
    params = _generator_params(params, cfg, store)
    v = None
    if cfg.lam > 0:
        v = cfg.lam * meta_gradient(shape, params, val_batch, trigger_batch, cfg.eps_fd)
        _check_finite(v, 'meta-gradient', 0)

    x0, labels = stream_batch.features, stream_batch.labels
    x = x0.clone()
    for step in range(cfg.n_steps):
        u = grad_params(shape, params, Batch(x, labels))
        if v is not None:
            u = u + v
        _check_finite(u, 'accumulative direction', step)
        direction = fd_mixed_grad_input(shape, params, x, labels, u, cfg.eps_fd)
        if cfg.beta > 0:
            direction = direction - cfg.beta * md_grad_input(shape, params, aux_params, x, cfg.measure)
        _check_finite(direction, 'accumulative meta-gradient', step)
        x = project_step(x, x0, direction, cfg.step_size, cfg.eps)
    return stream_batch.with_features(x)


def monitor_update(state, batch_training_loss, gamma):
    triggered = state.triggered or batch_training_loss >= gamma * state.reference_loss
    return replace(state, current_loss=batch_training_loss, triggered=triggered)


def run_attack_phase(trainer, cfg, max_batches, before_trigger=None, progress=False):
    """Feed accumulative batches until the monitor trips or max_batches is reached, then the trigger.

    The trigger batch is drawn from the stream before any accumulative batch. ``before_trigger``
    is called once, after the last accumulative batch and before the trigger is crafted.
    Returns (number of accumulative batches, TriggerOutcome).
    """
    trigger_base = trainer.next_batch()
    state = MonitorState(trainer.reference_loss)
    n_batches = 0
    with tqdm(total=max_batches, desc='accumulative', disable=not progress) as loop:
        while n_batches < max_batches and not state.triggered:
            poison = accumulative_perturb(trainer.next_batch(), trainer.shape, trainer.params, trainer.val_batch,
                                          trigger_base, cfg, aux_params=trainer.aux_params, store=trainer.store)
            loss = trainer.submit(poison)
            n_batches += 1
            if cfg.monitor_source == 'heldout':
                loss = trainer.heldout_loss()
            state = monitor_update(state, loss, cfg.monitor_gamma)
            loop.update(1)
            loop.set_postfix(loss=loss, ratio=loss / state.reference_loss)
            logger.info('accumulative_batch{}_loss_{:.6f}_ratio_{:.4f}'.format(
                n_batches, loss, loss / state.reference_loss))

    outcome = TriggerOutcome.TRIGGERED if state.triggered else TriggerOutcome.EXHAUSTED
    if before_trigger is not None:
        before_trigger()
    trigger = craft_trigger(trigger_base, trainer.shape, trainer.params, trainer.val_batch, cfg, store=trainer.store)
    trainer.submit(trigger)
    logger.info('trigger_{}_after_{}_batches'.format(outcome.value, n_batches))
    return n_batches, outcome
