import pytest
import torch

import stream_poison.defense as defense_module
from stream_poison.defense import (DefenseConfig, DefenseContext, DefenseKind, apply_defense, correct_at,
                                   correct_dsc, defend_dgc, defend_gc)
from stream_poison.discrepancy import Measure, ThresholdSchedule, memorization_discrepancy
from stream_poison.errors import ConfigError, ContractViolation
from stream_poison.numcore import ModelShape, cross_entropy_loss, grad_params

from conftest import random_batch, random_params


class TestGradientClipping:

    def test_reference_vector(self):
        clipped = defend_gc(torch.tensor([3.0, 4.0], dtype=torch.float64), 1.0)
        assert clipped.tolist() == pytest.approx([0.6, 0.8], abs=1e-15)

    def test_short_gradient_untouched(self):
        grad = torch.tensor([0.3, 0.4], dtype=torch.float64)
        assert defend_gc(grad, 1.0) is grad

    def test_norm_bound(self):
        generator = torch.Generator().manual_seed(0)
        for _ in range(20):
            grad = torch.randn(50, generator=generator, dtype=torch.float64) * 10
            assert torch.linalg.vector_norm(defend_gc(grad, 2.5)).item() <= 2.5 + 1e-12

    def test_invalid_norm(self):
        with pytest.raises(ContractViolation):
            defend_gc(torch.ones(3, dtype=torch.float64), 0.0)


class TestReverseCorrection:

    def test_zero_steps_is_identity(self, tiny_shape, tiny_params, tiny_batch):
        assert correct_at(tiny_batch, tiny_shape, tiny_params, 0.06, 0.015, 0) is tiny_batch

    def test_lowers_loss(self):
        shape = ModelShape.from_widths([3, 2])
        params = random_params(shape, seed=5)
        batch = random_batch(shape, 16, seed=5, low=0.2, high=0.8)
        corrected = correct_at(batch, shape, params, 0.1, 0.02, 5)
        assert cross_entropy_loss(shape, params, corrected) < cross_entropy_loss(shape, params, batch)
        assert torch.all((corrected.features - batch.features).abs() <= 0.1 + 1e-12)


class TestDiscrepancyCorrection:

    def _inputs(self, tiny_shape):
        params = random_params(tiny_shape, seed=1)
        aux = random_params(tiny_shape, seed=2)
        batch = random_batch(tiny_shape, 9, seed=3)
        return params, aux, batch

    def test_infinite_threshold_leaves_batch(self, tiny_shape):
        params, aux, batch = self._inputs(tiny_shape)
        out, steps = correct_dsc(batch, tiny_shape, params, aux, float('inf'), 0.06, 0.015, 10)
        assert torch.equal(out.features, batch.features)
        assert steps.tolist() == [0] * 9

    def test_zero_threshold_matches_reverse_pgd(self, tiny_shape):
        params, aux, batch = self._inputs(tiny_shape)
        out, steps = correct_dsc(batch, tiny_shape, params, aux, float('-inf'), 0.06, 0.015, 10)
        reference = correct_at(batch, tiny_shape, params, 0.06, 0.015, 9)
        assert torch.equal(out.features, reference.features)
        assert steps.tolist() == [9] * 9

    @pytest.mark.parametrize('measure', list(Measure))
    def test_corrects_exactly_the_flagged_samples(self, tiny_shape, measure):
        params, aux, batch = self._inputs(tiny_shape)
        md = memorization_discrepancy(tiny_shape, params, aux, batch.features, measure).per_sample
        threshold = md.median().item()
        out, steps = correct_dsc(batch, tiny_shape, params, aux, threshold, 0.06, 0.015, 6, measure)
        flagged = md > threshold
        assert torch.equal(steps > 0, flagged)
        assert int(steps.max()) <= 5
        assert torch.equal(out.features[~flagged], batch.features[~flagged])
        assert torch.all((out.features - batch.features).abs() <= 0.06 + 1e-12)

    def test_single_step_budget_never_moves(self, tiny_shape):
        params, aux, batch = self._inputs(tiny_shape)
        out, steps = correct_dsc(batch, tiny_shape, params, aux, float('-inf'), 0.06, 0.015, 1)
        assert torch.equal(out.features, batch.features) and int(steps.sum()) == 0


class TestDiscrepancyClipping:

    def test_clips_only_above_threshold(self, tiny_shape, tiny_batch):
        now, aux = random_params(tiny_shape, seed=1), random_params(tiny_shape, seed=2)
        report = memorization_discrepancy(tiny_shape, now, aux, tiny_batch.features)
        grad = torch.full((10,), 3.0, dtype=torch.float64)
        assert defend_dgc(grad, report, report.mean + 1.0, 1.0) is grad
        clipped = defend_dgc(grad, report, report.mean - 1.0, 1.0)
        assert torch.linalg.vector_norm(clipped).item() == pytest.approx(1.0, abs=1e-12)


class TestDefenseConfig:

    def test_kind_parsing(self):
        assert DefenseKind.parse('dsc') is DefenseKind.DSC
        assert DefenseKind.DGC.uses_discrepancy and not DefenseKind.AT.uses_discrepancy
        with pytest.raises(ConfigError, match='unknown defense'):
            DefenseKind.parse('firewall')

    @pytest.mark.parametrize('kwargs', [
        {'kind': 'GC'},
        {'kind': 'DGC', 'gc_clip_norm': -1.0},
        {'kind': 'AT', 'at_delta': 0.0},
        {'kind': 'DSC', 'dsc_max_steps': 0},
        {'kind': 'DSC', 'threshold_level': 0.0},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            DefenseConfig(**kwargs)


def _grad_fn(shape, params):
    return lambda batch: grad_params(shape, params, batch)


class TestApplyDefense:

    def test_standard_training_is_identity(self, tiny_shape, tiny_params, tiny_batch):
        context = DefenseContext(tiny_shape, tiny_params)
        batch, grad = apply_defense(DefenseConfig(), tiny_batch, _grad_fn(tiny_shape, tiny_params), context)
        assert batch is tiny_batch
        assert torch.equal(grad, grad_params(tiny_shape, tiny_params, tiny_batch))
        assert context.stats.batches == 1 and context.stats.samples == len(tiny_batch)

    def test_gradient_clipping_keeps_batch(self, tiny_shape, tiny_params, tiny_batch):
        context = DefenseContext(tiny_shape, tiny_params)
        cfg = DefenseConfig(kind='GC', gc_clip_norm=1e-6)
        batch, grad = apply_defense(cfg, tiny_batch, _grad_fn(tiny_shape, tiny_params), context)
        assert batch is tiny_batch
        assert torch.linalg.vector_norm(grad).item() == pytest.approx(1e-6, rel=1e-9)
        assert context.stats.clipped == 1

    def test_reverse_correction_counts_samples(self, tiny_shape, tiny_params, tiny_batch):
        context = DefenseContext(tiny_shape, tiny_params)
        cfg = DefenseConfig(kind='AT', at_steps=3)
        apply_defense(cfg, tiny_batch, _grad_fn(tiny_shape, tiny_params), context)
        assert context.stats.corrected == len(tiny_batch)
        assert context.stats.mean_steps == 3

    def test_threshold_follows_batch_index(self, monkeypatch, tiny_shape, tiny_params, tiny_batch):
        seen = []

        def fake_correct(batch, shape, params, aux_params, threshold, *args):
            seen.append(threshold)
            return batch, torch.zeros(len(batch), dtype=torch.long)

        monkeypatch.setattr(defense_module, 'correct_dsc', fake_correct)
        cfg = DefenseConfig(kind='DSC', dsc_schedule=ThresholdSchedule(mu=0.5, tau=0.02))
        context = DefenseContext(tiny_shape, tiny_params, aux_params=tiny_params, batch_index=3)
        apply_defense(cfg, tiny_batch, _grad_fn(tiny_shape, tiny_params), context)
        assert seen == [pytest.approx(0.56, abs=1e-15)]

    def test_discrepancy_defenses_need_inputs(self, tiny_shape, tiny_params, tiny_batch):
        grad_fn = _grad_fn(tiny_shape, tiny_params)
        with pytest.raises(ContractViolation, match='schedule'):
            apply_defense(DefenseConfig(kind='DSC'), tiny_batch, grad_fn,
                          DefenseContext(tiny_shape, tiny_params, aux_params=tiny_params))
        cfg = DefenseConfig(kind='DGC', gc_clip_norm=1.0, dsc_schedule=ThresholdSchedule(mu=0.5, tau=0.0))
        with pytest.raises(ContractViolation, match='auxiliary'):
            apply_defense(cfg, tiny_batch, grad_fn, DefenseContext(tiny_shape, tiny_params))

    def test_identical_auxiliary_never_clips(self, tiny_shape, tiny_params, tiny_batch):
        cfg = DefenseConfig(kind='DGC', gc_clip_norm=1e-6, dsc_schedule=ThresholdSchedule(mu=0.1, tau=0.0))
        context = DefenseContext(tiny_shape, tiny_params, aux_params=tiny_params)
        _, grad = apply_defense(cfg, tiny_batch, _grad_fn(tiny_shape, tiny_params), context)
        assert torch.equal(grad, grad_params(tiny_shape, tiny_params, tiny_batch))
        assert context.stats.clipped == 0
