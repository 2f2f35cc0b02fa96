import os
import shutil

import pandas as pd
import pytest
import torch
import yaml

from stream_poison.attack import AttackConfig, accumulative_perturb
from stream_poison.data_pre import save_dataset_idx
from stream_poison.errors import ConfigError
from stream_poison.expcli import (EXIT_CHECK, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, SUMMARY_COLUMNS, WORKERS_ENV,
                                  analysis_poison, analyze_seed, apply_axis, build_config, load_flat, main,
                                  make_dataset, model_shape, normalize, run_seed, worker_count)
from stream_poison.numcore import Batch
from stream_poison.stream import METRICS_COLUMNS

from conftest import random_params

REFERENCE_CONFIG = os.path.join(os.path.dirname(__file__), os.pardir, 'configs', 'reference.yaml')
BASELINES_FILE = os.path.join(os.path.dirname(REFERENCE_CONFIG), 'reference_baselines.yaml')


class TestConfig:

    def test_unknown_key(self, write_config, tmp_path):
        path = write_config('defnse.kind: DSC\noutput.dir: {}\n'.format(tmp_path / 'out'))
        assert main(['run', '--config', path]) == EXIT_CONFIG
        with pytest.raises(ConfigError, match='defnse.kind'):
            load_flat(path)

    def test_nested_equals_flat(self, write_config):
        flat = write_config('defense.kind: DGC\ndefense.gc_clip_norm: 2.0\nmodel.hidden: [4, 4]\n', 'flat.yaml')
        nested = write_config("""
            defense:
              kind: DGC
              gc_clip_norm: 2.0
            model:
              hidden: [4, 4]
            """, 'nested.yaml')
        assert load_flat(flat) == load_flat(nested)

    def test_defaults_and_coercion(self):
        flat = normalize({'seeds': '3..5', 'defense.kind': 'dsc', 'attack.measure': 'js'})
        assert flat['seeds'] == [3, 4, 5]
        assert flat['defense.kind'] == 'DSC' and flat['attack.measure'] == 'JS'
        assert flat['stream.burn_in_epochs'] == 40

    @pytest.mark.parametrize('raw', [
        {'stream.batch_size': 'many'},
        {'defense.kind': 'firewall'},
        {'attack.enabled': 'perhaps'},
    ])
    def test_bad_values(self, raw):
        with pytest.raises(ConfigError):
            normalize(raw)

    @pytest.mark.parametrize('raw', [
        {'seeds': ''},
        {'attack.eps': 0.01, 'attack.step_size': 0.05},
        {'defense.kind': 'GC'},
        {'defense.schedule': 'adaptive'},
        {'stream.burn_in_epochs': 4, 'stream.aux_epoch': 9},
    ])
    def test_invalid_combinations(self, raw):
        with pytest.raises(ConfigError):
            build_config(normalize(raw))

    def test_clean_oracle_disables_attack(self):
        flat = load_flat(os.path.join(os.path.dirname(REFERENCE_CONFIG), 'clean_oracle.yaml'))
        assert build_config(flat).attack is None

    def test_sweep_axis_k_moves_auxiliary(self):
        flat = normalize({'stream.burn_in_epochs': 40})
        assert apply_axis(flat, 'k', 12)['stream.aux_epoch'] == 28
        with pytest.raises(ConfigError):
            apply_axis(flat, 'k', 41)

    def test_sweep_axis_eps_keeps_step_inside_budget(self):
        flat = apply_axis(normalize({}), 'eps', 0.01)
        assert flat['attack.eps'] == 0.01 and flat['attack.step_size'] == 0.01
        build_config(flat)

    def test_worker_count(self, monkeypatch):
        monkeypatch.delenv(WORKERS_ENV, raising=False)
        assert worker_count() == 1
        monkeypatch.setenv(WORKERS_ENV, 'lots')
        with pytest.raises(ConfigError):
            worker_count()
        monkeypatch.setenv(WORKERS_ENV, '0')
        with pytest.raises(ConfigError):
            worker_count()


class TestRun:

    def test_writes_metrics(self, small_run_config):
        path, out = small_run_config()
        assert main(['run', '--config', path]) == EXIT_OK
        lines = (out / 'metrics.csv').read_text().splitlines()
        assert lines[0] == ','.join(METRICS_COLUMNS)
        assert len(lines) == 5
        frame = pd.read_csv(out / 'metrics.csv')
        assert frame['seed'].astype(str).tolist() == ['0', '1', 'mean', 'std']
        assert (frame['acc_post_poison'] == frame['acc_post_trigger']).all()
        assert sorted(p.name for p in (out / 'seed_0').iterdir()) == ['ckpt_{}.bin'.format(i) for i in range(5)]
        assert any(p.name.startswith('run_log_') for p in out.iterdir())

    def test_reruns_are_byte_identical(self, small_run_config, tmp_path):
        path, out = small_run_config(attack='true', defense='GC')
        assert main(['run', '--config', path, '--out', str(tmp_path / 'a')]) == EXIT_OK
        assert main(['run', '--config', path, '--out', str(tmp_path / 'b')]) == EXIT_OK
        first = (tmp_path / 'a' / 'metrics.csv').read_bytes()
        assert first == (tmp_path / 'b' / 'metrics.csv').read_bytes()
        frame = pd.read_csv(tmp_path / 'a' / 'metrics.csv')
        assert set(frame['trigger_outcome'].dropna()) <= {'triggered', 'exhausted'}

    def test_parallel_workers_keep_order(self, small_run_config, tmp_path, monkeypatch):
        path, _ = small_run_config(attack='true', defense='DSC')
        monkeypatch.setenv(WORKERS_ENV, '2')
        assert main(['run', '--config', path, '--out', str(tmp_path / 'pool')]) == EXIT_OK
        frame = pd.read_csv(tmp_path / 'pool' / 'metrics.csv')
        assert frame['seed'].astype(str).tolist() == ['0', '1', 'mean', 'std']
        assert (frame['defense_kind'] == 'DSC').all()

    def test_seed_override(self, small_run_config):
        path, out = small_run_config()
        assert main(['run', '--config', path, '--seeds', '3']) == EXIT_OK
        assert len((out / 'metrics.csv').read_text().splitlines()) == 4


class TestSweep:

    def test_single_value(self, small_run_config):
        path, out = small_run_config(extra='sweep.threshold_level: [1.0]\n')
        assert main(['sweep', '--config', path, '--axis', 'threshold_level', '--seeds', '0']) == EXIT_OK
        frame = pd.read_csv(out / 'sweep_threshold_level.csv')
        assert list(frame.columns) == ['axis_value'] + METRICS_COLUMNS
        assert len(frame) == 3
        assert (frame['axis_value'] == 1.0).all()

    def test_missing_values(self, small_run_config):
        path, _ = small_run_config()
        assert main(['sweep', '--config', path, '--axis', 'beta']) == EXIT_CONFIG

    def test_interval_axis_exports_tables(self, small_run_config):
        path, out = small_run_config(extra='sweep.k: [2]\n')
        assert main(['sweep', '--config', path, '--axis', 'k', '--seeds', '0']) == EXIT_OK
        interval = out / 'k_2' / 'seed_0' / 'interval.csv'
        assert interval.read_text().splitlines()[0] == 'k,mean_clean,std_clean,mean_poison,std_poison'


class TestAnalyze:

    def test_needs_burn_in_history(self, small_run_config):
        path, _ = small_run_config(epochs=0, aux=0)
        assert main(['run', '--config', path, '--seeds', '0']) == EXIT_OK
        assert main(['analyze', '--config', path, '--seeds', '0']) == EXIT_RUNTIME

    def test_missing_run_directory(self, small_run_config):
        path, _ = small_run_config()
        assert main(['analyze', '--config', path, '--seeds', '0']) == EXIT_RUNTIME

    def test_truncated_checkpoint_is_a_runtime_error(self, small_run_config):
        path, out = small_run_config()
        assert main(['run', '--config', path, '--seeds', '0']) == EXIT_OK
        checkpoint = out / 'seed_0' / 'ckpt_3.bin'
        checkpoint.write_bytes(checkpoint.read_bytes()[:12])
        assert main(['analyze', '--config', path, '--seeds', '0']) == EXIT_RUNTIME

    def test_truncated_idx_is_a_runtime_error(self, small_run_config, small_dataset, tmp_path):
        save_dataset_idx(small_dataset, tmp_path / 'x.idx', tmp_path / 'y.idx')
        (tmp_path / 'y.idx').write_bytes((tmp_path / 'y.idx').read_bytes()[:7])
        path, _ = small_run_config(extra='dataset.idx_features: {}\ndataset.idx_labels: {}\n'.format(
            tmp_path / 'x.idx', tmp_path / 'y.idx'))
        assert main(['run', '--config', path, '--seeds', '0']) == EXIT_RUNTIME

    def test_poison_comes_from_accumulative_attacker(self, small_run_config):
        path, _ = small_run_config(attack='true')
        cfg = build_config(load_flat(path))
        dataset = make_dataset(cfg, 0)
        shape = model_shape(cfg, dataset)
        params = random_params(shape, seed=3)
        clean, poison = analysis_poison(cfg, dataset, shape)
        train = dataset.split('train')
        trigger = Batch(train.features[:40], train.labels[:40])
        expected = accumulative_perturb(dataset.split('test'), shape, params, dataset.split('val'), trigger,
                                        AttackConfig(eps=0.06, step_size=0.03, n_steps=2))
        assert torch.equal(clean.features, dataset.split('test').features)
        assert torch.equal(poison(params).features, expected.features)

    def test_tables_after_run(self, small_run_config):
        path, out = small_run_config()
        assert main(['run', '--config', path, '--seeds', '0']) == EXIT_OK
        assert main(['analyze', '--config', path, '--seeds', '0']) == EXIT_OK
        seed_dir = out / 'seed_0'
        interval = pd.read_csv(seed_dir / 'interval.csv')
        assert interval['k'].tolist() == [1, 2, 3]
        assert (seed_dir / 'interval.csv').read_text().splitlines()[0] == \
            'k,mean_clean,std_clean,mean_poison,std_poison'
        assert list(pd.read_csv(seed_dir / 'ood.csv').columns)[0] == 'k'
        assert list(pd.read_csv(seed_dir / 'correlation.csv').columns) == ['k', 'md_gap', 'loss_gap']
        summary = pd.read_csv(out / 'analysis_summary.csv')
        assert list(summary.columns) == SUMMARY_COLUMNS
        assert summary['seed'].tolist() == [0]


class TestGradcheck:

    def test_empty_range(self):
        assert main(['gradcheck', '--seeds', '']) == EXIT_OK

    def test_clean_seeds_pass(self):
        assert main(['gradcheck', '--seeds', '0..2']) == EXIT_OK

    def test_injected_fault_is_reported(self):
        assert main(['gradcheck', '--seeds', '0', '--inject-fault']) == EXIT_CHECK

    def test_bad_range(self):
        assert main(['gradcheck', '--seeds', 'a..b']) == EXIT_CONFIG


REFERENCE_SEEDS = range(5)
CLEAN_ORACLE = {'attack.enabled': False}


def _seed_rows(out_dir, overrides):
    flat = load_flat(REFERENCE_CONFIG, overrides)
    return pd.DataFrame([run_seed(flat, seed, str(out_dir)) for seed in REFERENCE_SEEDS])


@pytest.fixture(scope='module')
def baselines():
    with open(BASELINES_FILE) as f:
        return yaml.safe_load(f)


@pytest.fixture(scope='module')
def reference_run(tmp_path_factory):
    out = tmp_path_factory.mktemp('reference')
    assert main(['run', '--config', REFERENCE_CONFIG, '--out', str(out)]) == EXIT_OK
    assert main(['analyze', '--config', REFERENCE_CONFIG, '--out', str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope='module')
def clean_oracle_rows(tmp_path_factory):
    out = tmp_path_factory.mktemp('clean_oracle')
    return {kind: _seed_rows(out / kind, dict(CLEAN_ORACLE, **{'defense.kind': kind}))
            for kind in ('ST', 'GC', 'AT', 'DSC', 'DGC')}


@pytest.fixture(scope='module')
def poisoned_rows(tmp_path_factory):
    out = tmp_path_factory.mktemp('poisoned')
    return {kind: _seed_rows(out / kind, {'defense.kind': kind}) for kind in ('ST', 'GC', 'AT', 'DSC')}


@pytest.mark.slow
class TestReferenceExperiment:

    def test_metrics_file(self, reference_run):
        frame = pd.read_csv(reference_run / 'metrics.csv')
        assert frame['seed'].astype(str).tolist() == ['0', '1', '2', '3', '4', 'mean', 'std']
        assert (frame['defense_kind'] == 'DSC').all()
        assert set(frame['trigger_outcome'].dropna()) <= {'triggered', 'exhausted'}

    def test_clean_discrepancy_grows_with_interval(self, reference_run, baselines):
        summary = pd.read_csv(reference_run / 'analysis_summary.csv')
        assert summary['seed'].tolist() == list(REFERENCE_SEEDS)
        assert (summary['spearman_clean_k'] >= baselines['analysis']['spearman_clean_k']).all()

    def test_poison_discrepancy_exceeds_clean(self, reference_run, baselines):
        summary = pd.read_csv(reference_run / 'analysis_summary.csv')
        assert (summary['ratio_poison_clean_max_k'] >= baselines['analysis']['ratio_poison_clean_max_k']).all()

    def test_discrepancy_gap_tracks_loss_gap(self, reference_run, baselines):
        summary = pd.read_csv(reference_run / 'analysis_summary.csv').set_index('seed')
        assert summary.loc[0, 'correlation'] >= baselines['analysis']['correlation']

    def test_measures_agree_on_ordering(self, reference_run, tmp_path):
        cfg = build_config(load_flat(REFERENCE_CONFIG, {'analysis.measure': 'JS'}))
        for seed in REFERENCE_SEEDS:
            shutil.copytree(reference_run / 'seed_{}'.format(seed), tmp_path / 'seed_{}'.format(seed))
            analyze_seed(cfg, seed, str(tmp_path), interval_only=True)
            kl = pd.read_csv(reference_run / 'seed_{}'.format(seed) / 'interval.csv')
            js = pd.read_csv(tmp_path / 'seed_{}'.format(seed) / 'interval.csv')
            assert kl['k'].tolist() == js['k'].tolist()
            assert ((kl['mean_poison'] > kl['mean_clean']) == (js['mean_poison'] > js['mean_clean'])).all()

    def test_start_accuracy_band(self, clean_oracle_rows, baselines):
        low, high = baselines['clean_oracle']['acc_start']
        assert low <= clean_oracle_rows['ST']['acc_start'].mean() <= high

    def test_clean_oracle_ordering(self, clean_oracle_rows, baselines):
        limits = baselines['clean_oracle']
        acc = {kind: rows['acc_post_trigger'].mean() for kind, rows in clean_oracle_rows.items()}
        assert abs(acc['DSC'] - acc['ST']) <= limits['dsc_within_st']
        assert acc['AT'] <= acc['ST'] - limits['at_below_st']
        assert acc['DGC'] >= acc['GC'] - limits['dgc_vs_gc_band']

    def test_standard_training_drops_most(self, poisoned_rows, baselines):
        delta = {kind: rows['delta'].mean() for kind, rows in poisoned_rows.items()}
        assert delta['ST'] < min(delta['GC'], delta['AT'], delta['DSC'])
        assert delta['DSC'] >= delta['AT'] - baselines['poisoned']['delta_band']

    def test_discrepancy_correction_delays_trigger(self, poisoned_rows):
        assert poisoned_rows['ST']['n_poison_batches'].mean() < poisoned_rows['DSC']['n_poison_batches'].mean()

    def test_adaptive_attack_weakens_with_beta(self, poisoned_rows, baselines, tmp_path):
        limits = baselines['adaptive']
        drops = [poisoned_rows['ST']['delta'].abs().mean()]
        for beta in limits['beta'][1:]:
            rows = _seed_rows(tmp_path / 'beta_{}'.format(beta), {'defense.kind': 'ST', 'attack.beta': beta})
            drops.append(rows['delta'].abs().mean())
        increases = [later - earlier for earlier, later in zip(drops, drops[1:]) if later > earlier]
        assert len(increases) <= limits['max_inversions']
        assert all(step <= limits['inversion_band'] for step in increases)
