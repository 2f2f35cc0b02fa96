"""Memorization Discrepancy: how far a historical model's outputs drift from the current model's
on the same inputs, plus threshold scheduling and the interval analyses built on it."""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
import torch

from .errors import ContractViolation
from .numcore import (DTYPE, PROB_FLOOR, Batch, backprop_input, cross_entropy_loss, forward_probs, js_rows,
                      kl_rows)

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['k', 'mean_clean', 'std_clean', 'mean_poison', 'std_poison']
OOD_COLUMNS = SWEEP_COLUMNS + ['mean_ood', 'std_ood']
CSV_FLOAT_FORMAT = '%.17g'


class Measure(str, Enum):
    KL = 'KL'
    JS = 'JS'

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ContractViolation('unknown discrepancy measure {!r}'.format(value)) from None


@dataclass(frozen=True)
class MDReport:
    per_sample: torch.Tensor = field(repr=False)
    mean: float
    std: float
    measure: Measure
    interval_k: int = None
    current_step: int = None
    aux_step: int = None


@dataclass(frozen=True)
class ThresholdSchedule:
    mu: float
    tau: float

    def __post_init__(self):
        if not self.mu > 0:
            raise ContractViolation('threshold mu must be > 0, got {}'.format(self.mu))
        if not self.tau >= 0:
            raise ContractViolation('threshold tau must be >= 0, got {}'.format(self.tau))


@dataclass(frozen=True)
class CorrelationReport:
    """coefficient is None when the correlation is undefined (a constant column)."""
    coefficient: float
    table: pd.DataFrame = field(repr=False)

    @property
    def applicable(self):
        return self.coefficient is not None


def _features(data):
    if isinstance(data, Batch):
        return data.features
    return torch.as_tensor(data, dtype=DTYPE)


def _divergence_rows(measure, p, q):
    return kl_rows(p, q) if Measure.parse(measure) is Measure.KL else js_rows(p, q)


def memorization_discrepancy(shape, params_now, params_aux, features, measure=Measure.KL,
                             interval_k=None, current_step=None, aux_step=None):
    """Per-sample D(f(x; aux), f(x; now)); the historical model is always the first argument."""
    features = _features(features)
    p_hist = forward_probs(shape, params_aux, features)
    p_now = forward_probs(shape, params_now, features)
    per_sample = _divergence_rows(measure, p_hist, p_now)
    return MDReport(
        per_sample=per_sample,
        mean=per_sample.mean().item(),
        std=per_sample.std(unbiased=False).item(),
        measure=Measure.parse(measure),
        interval_k=interval_k,
        current_step=current_step,
        aux_step=aux_step,
    )


def md_grad_input(shape, params_now, params_aux, features, measure=Measure.KL):
    """Per-sample input gradient of the discrepancy; both softmax heads are differentiated."""
    features = _features(features)
    p = forward_probs(shape, params_aux, features)
    q = forward_probs(shape, params_now, features)
    p_safe, q_safe = p.clamp_min(PROB_FLOOR), q.clamp_min(PROB_FLOOR)
    if Measure.parse(measure) is Measure.KL:
        grad_p = torch.log(p_safe / q_safe) + 1
        grad_q = -p / q_safe
    else:
        m = ((p + q) / 2).clamp_min(PROB_FLOOR)
        grad_p = 0.5 * torch.log(p_safe / m)
        grad_q = 0.5 * torch.log(q_safe / m)
    # softmax vector-Jacobian product
    dlogits_p = p * (grad_p - (p * grad_p).sum(dim=1, keepdim=True))
    dlogits_q = q * (grad_q - (q * grad_q).sum(dim=1, keepdim=True))
    return backprop_input(shape, params_aux, features, dlogits_p) + backprop_input(shape, params_now, features,
                                                                                  dlogits_q)


def threshold_at(schedule, m, level=1.0):
    if m < 0:
        raise ContractViolation('batch index must be >= 0, got {}'.format(m))
    threshold = schedule.mu + schedule.tau * m
    return threshold if level == 1.0 else level * threshold


def estimate_schedule(md_series, margin_c=0.0):
    """Least-squares line through (m, clean mean MD); mu is the intercept lifted by margin_c residual stds."""
    points = np.asarray(list(md_series), dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 3:
        raise ContractViolation('estimate_schedule needs at least 3 (m, md) points, got {}'.format(len(points)))
    m, y = points[:, 0], points[:, 1]
    m_centered = m - m.mean()
    sxx = float(np.dot(m_centered, m_centered))
    if sxx == 0.0:
        raise ContractViolation('degenerate schedule fit: all batch indices are equal')
    slope = float(np.dot(m_centered, y - y.mean())) / sxx
    intercept = float(y.mean()) - slope * float(m.mean())
    residual_std = float(np.sqrt(np.mean((y - (intercept + slope * m)) ** 2)))
    mu = intercept + margin_c * residual_std
    if mu <= 0:
        logger.warning('estimated threshold intercept {:.3e} is not positive, flooring at {:.0e}'.format(
            mu, PROB_FLOOR))
        mu = PROB_FLOOR
    schedule = ThresholdSchedule(mu=mu, tau=max(slope, 0.0))
    logger.info('schedule_mu_{:.6g}_tau_{:.6g}_residual_std_{:.3g}'.format(schedule.mu, schedule.tau,
                                                                            residual_std))
    return schedule


def _interval_pair(store, k, anchor):
    current = store.fetch(back_k=0, anchor=anchor)
    historical = store.fetch(back_k=k, anchor=anchor)
    return current, historical


def _sweep(store, shape, columns, k_list, measure, anchor):
    rows = []
    for k in k_list:
        current, historical = _interval_pair(store, k, anchor)
        row = {'k': int(k)}
        for name, data in columns:
            report = memorization_discrepancy(shape, current.params, historical.params, data, measure,
                                              interval_k=int(k), current_step=current.step_id,
                                              aux_step=historical.step_id)
            row['mean_' + name] = report.mean
            row['std_' + name] = report.std
        rows.append(row)
    return rows


def interval_sweep(store, shape, clean_batch, poison_batch, k_list, measure=Measure.KL, anchor=None):
    rows = _sweep(store, shape, [('clean', clean_batch), ('poison', poison_batch)], k_list, measure, anchor)
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def ood_compare(shape, store, clean_batch, poison_batch, ood_batch, k_list, measure=Measure.KL, anchor=None):
    rows = _sweep(store, shape, [('clean', clean_batch), ('poison', poison_batch), ('ood', ood_batch)],
                  k_list, measure, anchor)
    return pd.DataFrame(rows, columns=OOD_COLUMNS)


def pearson(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size < 2 or a.std() == 0 or b.std() == 0:
        return None
    coefficient = float(np.corrcoef(a, b)[0, 1])
    return None if math.isnan(coefficient) else coefficient


def spearman(a, b):
    return pearson(pd.Series(a).rank().to_numpy(), pd.Series(b).rank().to_numpy())


def correlation_check(store, shape, clean_set, poison_generator, k_window, measure=Measure.KL, anchor=None):
    """Relate the poison-minus-clean discrepancy gap to the loss drop across intervals.

    ``poison_generator(params)`` returns the poison batch crafted against those parameters; the gap
    pairs the historical model on its own poison with the current model on its own poison.
    """
    k_window = [int(k) for k in k_window]
    if len(k_window) < 3:
        raise ContractViolation('correlation window needs at least 3 intervals, got {}'.format(len(k_window)))
    clean_features = _features(clean_set)
    current = store.fetch(back_k=0, anchor=anchor)
    poison_now = _features(poison_generator(current.params))
    p_now_poison = forward_probs(shape, current.params, poison_now)
    p_now_clean = forward_probs(shape, current.params, clean_features)
    loss_now = cross_entropy_loss(shape, current.params, clean_set)

    rows = []
    for k in k_window:
        historical = store.fetch(back_k=k, anchor=anchor)
        poison_then = _features(poison_generator(historical.params))
        md_poison = _divergence_rows(measure, forward_probs(shape, historical.params, poison_then), p_now_poison)
        md_clean = _divergence_rows(measure, forward_probs(shape, historical.params, clean_features), p_now_clean)
        rows.append({
            'k': k,
            'md_gap': (md_poison.mean() - md_clean.mean()).item(),
            'loss_gap': cross_entropy_loss(shape, historical.params, clean_set) - loss_now,
        })
    table = pd.DataFrame(rows, columns=['k', 'md_gap', 'loss_gap'])
    coefficient = pearson(table['md_gap'], table['loss_gap'])
    if coefficient is None:
        logger.warning('correlation over k={}..{} is undefined (constant column)'.format(k_window[0], k_window[-1]))
    return CorrelationReport(coefficient, table)


def write_sweep_csv(table, path):
    table.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
