"""Defenses applied to each incoming batch or its gradient: plain training (ST), gradient clipping (GC),
reverse adversarial correction (AT), discrepancy-aware sample correction (DSC) and
discrepancy-aware gradient clipping (DGC)."""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch

from .attack import MINIMIZE, pgd_perturb, project_step
from .discrepancy import Measure, ThresholdSchedule, memorization_discrepancy, threshold_at
from .errors import ConfigError, ContractViolation
from .numcore import grad_input

logger = logging.getLogger(__name__)


class DefenseKind(str, Enum):
    ST = 'ST'
    GC = 'GC'
    AT = 'AT'
    DSC = 'DSC'
    DGC = 'DGC'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ConfigError('defense.kind: unknown defense {!r} (expected one of {})'.format(
                value, ', '.join(k.value for k in cls))) from None

    @property
    def uses_discrepancy(self):
        return self in (DefenseKind.DSC, DefenseKind.DGC)


@dataclass(frozen=True)
class DefenseConfig:
    kind: DefenseKind = DefenseKind.ST
    gc_clip_norm: Optional[float] = None
    at_eps: float = 0.06
    at_delta: float = 0.015
    at_steps: int = 10
    dsc_schedule: Optional[ThresholdSchedule] = None
    dsc_max_steps: int = 10
    aux_checkpoint_id: Optional[int] = None
    measure: Measure = Measure.KL
    threshold_level: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', DefenseKind.parse(self.kind))
        object.__setattr__(self, 'measure', Measure.parse(self.measure))
        kind = self.kind
        if kind in (DefenseKind.GC, DefenseKind.DGC):
            if self.gc_clip_norm is None or not self.gc_clip_norm > 0:
                raise ConfigError('defense.gc_clip_norm must be > 0 for {}, got {}'.format(
                    kind.value, self.gc_clip_norm))
        if kind in (DefenseKind.AT, DefenseKind.DSC):
            if self.at_eps < 0:
                raise ConfigError('defense.at_eps must be >= 0, got {}'.format(self.at_eps))
            if not self.at_delta > 0:
                raise ConfigError('defense.at_delta must be > 0, got {}'.format(self.at_delta))
        if kind is DefenseKind.AT and self.at_steps < 0:
            raise ConfigError('defense.at_steps must be >= 0, got {}'.format(self.at_steps))
        if kind is DefenseKind.DSC and self.dsc_max_steps < 1:
            raise ConfigError('defense.dsc_max_steps must be >= 1, got {}'.format(self.dsc_max_steps))
        if kind.uses_discrepancy and not self.threshold_level > 0:
            raise ConfigError('defense.threshold_level must be > 0, got {}'.format(self.threshold_level))


@dataclass
class DefenseStats:
    batches: int = 0
    samples: int = 0
    corrected: int = 0
    correction_steps: int = 0
    clipped: int = 0

    @property
    def corrected_fraction(self):
        return self.corrected / self.samples if self.samples else 0.0

    @property
    def mean_steps(self):
        return self.correction_steps / self.corrected if self.corrected else 0.0


@dataclass
class DefenseContext:
    shape: object
    params: object
    aux_params: object = None
    batch_index: int = 0
    stats: DefenseStats = field(default_factory=DefenseStats)


def defend_gc(grad, clip_norm):
    if not clip_norm > 0:
        raise ContractViolation('clip_norm must be > 0, got {}'.format(clip_norm))
    norm = torch.linalg.vector_norm(grad).item()
    if norm > clip_norm:
        return grad * (clip_norm / norm)
    return grad


def correct_at(batch, shape, params, at_eps, at_delta, at_steps):
    return pgd_perturb(batch, shape, params, at_eps, at_delta, at_steps, mode=MINIMIZE)


def correct_dsc(batch, shape, params, aux_params, threshold, eps, delta, max_steps, measure=Measure.KL):
    """Reverse-PGD only the samples whose discrepancy exceeds ``threshold``.

    Each sample starts at n = 1 and steps while its discrepancy (recomputed on the corrected
    iterate) stays above the threshold and n < max_steps, so at most max_steps - 1 steps are taken.
    Returns the corrected batch and the per-sample step counts.
    """
    x0, labels = batch.features, batch.labels
    x = x0.clone()
    steps = torch.zeros(len(batch), dtype=torch.long)
    active = memorization_discrepancy(shape, params, aux_params, x, measure).per_sample > threshold
    n = 1
    while n < max_steps and active.any():
        stepped = project_step(x, x0, grad_input(shape, params, x, labels), -delta, eps)
        x = torch.where(active[:, None], stepped, x)
        steps += active.long()
        n += 1
        active = active & (memorization_discrepancy(shape, params, aux_params, x, measure).per_sample > threshold)
    return batch.with_features(x), steps


def defend_dgc(grad, md_report, threshold, clip_norm):
    if md_report.mean > threshold:
        return defend_gc(grad, clip_norm)
    return grad


def _require_discrepancy_inputs(cfg, context):
    if cfg.dsc_schedule is None:
        raise ContractViolation('{} needs a threshold schedule'.format(cfg.kind.value))
    if context.aux_params is None:
        raise ContractViolation('{} needs the auxiliary parameters'.format(cfg.kind.value))
    return threshold_at(cfg.dsc_schedule, context.batch_index, cfg.threshold_level)


def apply_defense(cfg, batch, grad_fn, context):
    """Run the configured defense on one incoming batch; returns (training batch, gradient).

    ``grad_fn(batch)`` computes the parameter gradient of the (possibly corrected) batch.
    """
    kind = DefenseKind.parse(cfg.kind)
    stats = context.stats
    stats.batches += 1
    stats.samples += len(batch)

    if kind is DefenseKind.AT:
        batch = correct_at(batch, context.shape, context.params, cfg.at_eps, cfg.at_delta, cfg.at_steps)
        if cfg.at_eps > 0 and cfg.at_steps > 0:
            stats.corrected += len(batch)
            stats.correction_steps += len(batch) * cfg.at_steps
    elif kind is DefenseKind.DSC:
        threshold = _require_discrepancy_inputs(cfg, context)
        batch, steps = correct_dsc(batch, context.shape, context.params, context.aux_params, threshold,
                                   cfg.at_eps, cfg.at_delta, cfg.dsc_max_steps, cfg.measure)
        stats.corrected += int((steps > 0).sum())
        stats.correction_steps += int(steps.sum())

    grad = grad_fn(batch)

    if kind is DefenseKind.GC:
        clipped = defend_gc(grad, cfg.gc_clip_norm)
        stats.clipped += int(clipped is not grad)
        grad = clipped
    elif kind is DefenseKind.DGC:
        threshold = _require_discrepancy_inputs(cfg, context)
        report = memorization_discrepancy(context.shape, context.params, context.aux_params, batch.features,
                                          cfg.measure)
        clipped = defend_dgc(grad, report, threshold, cfg.gc_clip_norm)
        stats.clipped += int(clipped is not grad)
        grad = clipped
    return batch, grad
