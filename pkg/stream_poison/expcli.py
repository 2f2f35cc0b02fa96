"""Command-line front end: run | sweep | analyze | gradcheck.

Configs are YAML mappings of dotted keys (``defense.kind: DSC``); nested mappings are flattened
to the same keys. Every key must appear in REGISTRY.
"""
import argparse
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import pandas as pd
import yaml
from tqdm import tqdm

from .attack import AttackConfig, accumulative_perturb
from .checkpoints import CheckpointStore, load_store, save_store
from .data_pre import gen_ood, gen_synthetic, load_idx_dataset
from .defense import DefenseConfig, DefenseKind
from .discrepancy import (CSV_FLOAT_FORMAT, Measure, ThresholdSchedule, correlation_check, estimate_schedule,
                          interval_sweep, ood_compare, spearman, write_sweep_csv)
from .errors import CheckpointLookupError, ConfigError, ContractViolation, GradcheckFailure, NumericalError
from .numcore import Batch, ModelShape, gradcheck
from .stream import METRICS_COLUMNS, StreamConfig, burn_in, victim_phase
from .utils import LOGGER_NAME, close_logger, component_seeds, create_logger, parse_range

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

WORKERS_ENV = 'STREAM_POISON_WORKERS'
SWEEP_AXES = ('beta', 'k', 'eps', 'threshold_level', 'measure')
METRICS_FILE = 'metrics.csv'
SUMMARY_FILE = 'analysis_summary.csv'
SUMMARY_COLUMNS = ['seed', 'measure', 'spearman_clean_k', 'ratio_poison_clean_max_k', 'correlation',
                   'slope_poison', 'slope_ood']
RUNTIME_ERRORS = (ContractViolation, NumericalError, CheckpointLookupError, OSError)


def _optional(convert):
    def wrapped(value):
        return None if value is None or value == '' else convert(value)
    return wrapped


def _list_of(convert):
    def wrapped(value):
        if value is None:
            return []
        if isinstance(value, str):
            value = [v for v in value.split(',') if v.strip()]
        elif not isinstance(value, (list, tuple)):
            value = [value]
        return [convert(v.strip() if isinstance(v, str) else v) for v in value]
    return wrapped


def _bool(value):
    if isinstance(value, bool):
        return value
    if str(value).lower() in ('true', 'yes', '1', 'on'):
        return True
    if str(value).lower() in ('false', 'no', '0', 'off'):
        return False
    raise ValueError('not a boolean: {!r}'.format(value))


def _int(value):
    if isinstance(value, float) and not value.is_integer():
        raise ValueError('not an integer: {!r}'.format(value))
    return int(value)


def _range(value):
    return parse_range('' if value is None else value)


def _measure(value):
    return Measure.parse(value).value


def _defense_kind(value):
    return DefenseKind.parse(value).value


REGISTRY = {
    'dataset.kind': (str, 'blobs'),
    'dataset.n': (_int, 4000),
    'dataset.dim': (_int, 8),
    'dataset.n_classes': (_int, 4),
    'dataset.noise': (float, 1.0),
    'dataset.idx_features': (_optional(str), None),
    'dataset.idx_labels': (_optional(str), None),
    'model.hidden': (_list_of(_int), [32, 32]),
    'stream.batch_size': (_int, 100),
    'stream.burn_in_epochs': (_int, 40),
    'stream.lr': (float, 0.1),
    'stream.momentum': (float, 0.9),
    'stream.weight_decay': (float, 1e-4),
    'stream.aux_epoch': (_optional(_int), None),
    'stream.schedule_epochs': (_int, 1),
    'stream.victim_batches': (_int, 100),
    'stream.victim_checkpoint_every': (_int, 0),
    'attack.enabled': (_bool, True),
    'attack.eps': (float, 0.06),
    'attack.step_size': (float, 0.015),
    'attack.n_steps': (_int, 10),
    'attack.lambda': (float, 1.0),
    'attack.beta': (float, 0.0),
    'attack.surrogate_step': (_optional(_int), None),
    'attack.eps_fd': (_optional(float), None),
    'attack.monitor_gamma': (float, 1.5),
    'attack.monitor_source': (str, 'batch'),
    'attack.measure': (_measure, 'KL'),
    'defense.kind': (_defense_kind, 'ST'),
    'defense.gc_clip_norm': (_optional(float), None),
    'defense.at_eps': (_optional(float), None),
    'defense.at_delta': (_optional(float), None),
    'defense.at_steps': (_optional(_int), None),
    'defense.dsc_max_steps': (_int, 10),
    'defense.aux_checkpoint_id': (_optional(_int), None),
    'defense.measure': (_measure, 'KL'),
    'defense.schedule': (str, 'estimate'),
    'defense.mu': (float, 0.5),
    'defense.tau': (float, 0.02),
    'defense.margin_c': (float, 1.0),
    'defense.threshold_level': (float, 1.0),
    'analysis.k_list': (_range, ''),
    'analysis.measure': (_measure, 'KL'),
    'analysis.stable_window': (_range, ''),
    'analysis.ood_shift': (str, 'mean'),
    'analysis.ood_magnitude': (float, 0.3),
    'analysis.current_step': (_optional(_int), None),
    'sweep.beta': (_list_of(float), []),
    'sweep.k': (_list_of(_int), []),
    'sweep.eps': (_list_of(float), []),
    'sweep.threshold_level': (_list_of(float), []),
    'sweep.measure': (_list_of(_measure), []),
    'output.dir': (str, 'output'),
    'output.progress': (_bool, False),
    'output.run_id': (str, 'run'),
    'seeds': (_range, '0..4'),
}


@dataclass(frozen=True)
class DatasetSection:
    kind: str
    n: int
    dim: int
    n_classes: int
    noise: float
    idx_features: Optional[str]
    idx_labels: Optional[str]


@dataclass(frozen=True)
class DefenseSection:
    kind: str
    gc_clip_norm: Optional[float]
    at_eps: Optional[float]
    at_delta: Optional[float]
    at_steps: Optional[int]
    dsc_max_steps: int
    aux_checkpoint_id: Optional[int]
    measure: str
    schedule: str
    mu: float
    tau: float
    margin_c: float
    threshold_level: float


@dataclass(frozen=True)
class AnalysisSection:
    k_list: list
    measure: str
    stable_window: list
    ood_shift: str
    ood_magnitude: float
    current_step: Optional[int]


@dataclass(frozen=True)
class SweepSection:
    beta: list
    k: list
    eps: list
    threshold_level: list
    measure: list


@dataclass(frozen=True)
class OutputSection:
    dir: str
    progress: bool
    run_id: str


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSection
    hidden: list
    stream: StreamConfig
    attack: Optional[AttackConfig]
    defense: DefenseSection
    analysis: AnalysisSection
    sweep: SweepSection
    output: OutputSection
    seeds: list


def flatten(mapping, prefix=''):
    flat = {}
    for key, value in (mapping or {}).items():
        path = '{}{}'.format(prefix, key)
        if isinstance(value, dict):
            flat.update(flatten(value, path + '.'))
        else:
            flat[path] = value
    return flat


def normalize(raw):
    """Check every key against the registry and coerce values; missing keys take defaults."""
    flat = {}
    for key in raw:
        if key not in REGISTRY:
            raise ConfigError('unknown config key {!r}'.format(key))
    for key, (convert, default) in REGISTRY.items():
        value = raw.get(key, default)
        try:
            flat[key] = convert(value)
        except (TypeError, ValueError, ConfigError, ContractViolation) as exc:
            raise ConfigError('invalid value {!r} for {}: {}'.format(value, key, exc)) from None
    return flat


def load_flat(path, overrides=None):
    try:
        with open(path, 'r') as f:
            raw = yaml.safe_load(f)
    except OSError as exc:
        raise ConfigError('cannot read config {}: {}'.format(path, exc)) from None
    except yaml.YAMLError as exc:
        raise ConfigError('cannot parse config {}: {}'.format(path, exc)) from None
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError('config {} must hold a mapping of keys'.format(path))
    raw = flatten(raw)
    raw.update(overrides or {})
    return normalize(raw)


def _section(cls, flat, prefix):
    return cls(**{name: flat[prefix + name] for name in cls.__dataclass_fields__})


def build_config(flat):
    if not flat['seeds']:
        raise ConfigError('seeds: the seed list is empty')
    stream = StreamConfig(
        batch_size=flat['stream.batch_size'], burn_in_epochs=flat['stream.burn_in_epochs'], lr=flat['stream.lr'],
        momentum=flat['stream.momentum'], weight_decay=flat['stream.weight_decay'], seed=flat['seeds'][0],
        aux_epoch=flat['stream.aux_epoch'], schedule_epochs=flat['stream.schedule_epochs'],
        victim_batches=flat['stream.victim_batches'], victim_checkpoint_every=flat['stream.victim_checkpoint_every'])
    attack = None
    if flat['attack.enabled']:
        attack = AttackConfig(
            eps=flat['attack.eps'], step_size=flat['attack.step_size'], n_steps=flat['attack.n_steps'],
            lam=flat['attack.lambda'], beta=flat['attack.beta'], surrogate_step=flat['attack.surrogate_step'],
            eps_fd=flat['attack.eps_fd'], monitor_gamma=flat['attack.monitor_gamma'],
            monitor_source=flat['attack.monitor_source'], measure=flat['attack.measure'])
    defense = _section(DefenseSection, flat, 'defense.')
    if defense.schedule not in ('estimate', 'fixed'):
        raise ConfigError("defense.schedule must be 'estimate' or 'fixed', got {!r}".format(defense.schedule))
    if any(h < 1 for h in flat['model.hidden']):
        raise ConfigError('model.hidden widths must be >= 1')
    cfg = ExperimentConfig(
        dataset=_section(DatasetSection, flat, 'dataset.'),
        hidden=flat['model.hidden'],
        stream=stream,
        attack=attack,
        defense=defense,
        analysis=_section(AnalysisSection, flat, 'analysis.'),
        sweep=_section(SweepSection, flat, 'sweep.'),
        output=_section(OutputSection, flat, 'output.'),
        seeds=flat['seeds'],
    )
    # the defense is only fully checked once its schedule is known; check its static fields now
    defense_config(cfg, ThresholdSchedule(mu=1.0, tau=0.0))
    return cfg


def defense_config(cfg, schedule):
    section = cfg.defense
    attack_values = cfg.attack or AttackConfig()
    return DefenseConfig(
        kind=section.kind,
        gc_clip_norm=section.gc_clip_norm,
        at_eps=attack_values.eps if section.at_eps is None else section.at_eps,
        at_delta=attack_values.step_size if section.at_delta is None else section.at_delta,
        at_steps=attack_values.n_steps if section.at_steps is None else section.at_steps,
        dsc_schedule=schedule,
        dsc_max_steps=section.dsc_max_steps,
        aux_checkpoint_id=section.aux_checkpoint_id,
        measure=section.measure,
        threshold_level=section.threshold_level,
    )


def resolve_schedule(cfg, burn):
    section = cfg.defense
    if not DefenseKind.parse(section.kind).uses_discrepancy:
        return None
    if section.schedule == 'fixed':
        return ThresholdSchedule(mu=section.mu, tau=section.tau)
    return estimate_schedule(burn.md_series, section.margin_c)


def make_dataset(cfg, seed):
    section = cfg.dataset
    seeds = component_seeds(seed)
    if section.idx_features:
        return load_idx_dataset(section.idx_features, section.idx_labels, seeds['dataset'])
    return gen_synthetic(section.kind, section.n, section.dim, section.n_classes, section.noise, seeds['dataset'])


def model_shape(cfg, dataset):
    return ModelShape.from_widths([dataset.in_dim, *cfg.hidden, dataset.n_classes])


def seed_dir(out_dir, seed):
    return os.path.join(out_dir, 'seed_{}'.format(seed))


def run_seed(flat, seed, out_dir):
    """burn-in + victim phase for one seed; burn-in checkpoints are saved under seed_<s>/."""
    cfg = build_config(flat)
    dataset = make_dataset(cfg, seed)
    shape = model_shape(cfg, dataset)
    stream_cfg = replace(cfg.stream, seed=seed)
    store = CheckpointStore(auxiliary_id=stream_cfg.aux_checkpoint)
    burn = burn_in(dataset, shape, stream_cfg, store, measure=Measure.parse(cfg.defense.measure),
                   progress=cfg.output.progress)
    save_store(store, seed_dir(out_dir, seed))
    defense_cfg = defense_config(cfg, resolve_schedule(cfg, burn))
    row = victim_phase(burn, dataset, cfg.attack, defense_cfg, stream_cfg, store, stream_cfg.victim_batches,
                       run_id=cfg.output.run_id, progress=cfg.output.progress)
    return row.as_dict()


def _run_seed_job(job):
    return run_seed(*job)


def worker_count():
    value = os.environ.get(WORKERS_ENV, '1')
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError('{}={!r} is not an integer'.format(WORKERS_ENV, value)) from None
    if workers < 1:
        raise ConfigError('{} must be >= 1, got {}'.format(WORKERS_ENV, workers))
    return workers


def run_jobs(jobs):
    """Results come back in job order whatever the completion order."""
    workers = worker_count()
    if workers == 1 or len(jobs) == 1:
        for job in jobs:
            yield _run_seed_job(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(_run_seed_job, jobs)


def summary_rows(rows, prefix=None):
    frame = pd.DataFrame(rows, columns=METRICS_COLUMNS)
    numeric = ['acc_start', 'n_poison_batches', 'acc_post_poison', 'acc_post_trigger', 'delta']
    values = frame[numeric].apply(pd.to_numeric)
    summary = []
    for label, stat in (('mean', values.mean()), ('std', values.std(ddof=0))):
        row = {'run_id': frame['run_id'].iloc[0], 'seed': label, 'defense_kind': frame['defense_kind'].iloc[0],
               'trigger_outcome': None}
        row.update({name: (None if pd.isna(stat[name]) else float(stat[name])) for name in numeric})
        summary.append(row)
    if prefix:
        for row in summary:
            row.update(prefix)
    return summary


class MetricsWriter:
    """Append-only CSV; each row is flushed and fsync'd as it is written."""

    def __init__(self, path, columns):
        self.path = path
        self.columns = columns
        self._file = open(path, 'w', newline='')
        self._file.write(','.join(columns) + '\n')
        self._sync()

    def append(self, row):
        frame = pd.DataFrame([row], columns=self.columns).astype(object)
        frame.to_csv(self._file, header=False, index=False, float_format=CSV_FLOAT_FORMAT)
        self._sync()

    def _sync(self):
        self._file.flush()
        os.fsync(self._file.fileno())

    def close(self):
        self._sync()
        self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _format_value(value):
    if isinstance(value, float):
        return CSV_FLOAT_FORMAT % value
    return value


def _formatted(row):
    return {key: _format_value(value) for key, value in row.items()}


def _component(exc):
    tb = exc.__traceback__
    name = LOGGER_NAME
    while tb is not None:
        module = tb.tb_frame.f_globals.get('__name__', '')
        if module.startswith(LOGGER_NAME + '.'):
            name = module
        tb = tb.tb_next
    return name.rsplit('.', 1)[-1]


def _start(flat, command):
    out_dir = flat['output.dir']
    os.makedirs(out_dir, exist_ok=True)
    timestamp = time.strftime('%Y-%m-%d_%H-%M-%S', time.localtime())
    return create_logger(os.path.join(out_dir, '{}_log_{}.txt'.format(command, timestamp)), add_stream=True)


def _overrides(out=None, seeds=None):
    overrides = {}
    if out is not None:
        overrides['output.dir'] = out
    if seeds is not None:
        overrides['seeds'] = seeds
    return overrides


def _guarded(command, body, flat):
    run_logger = _start(flat, command)
    try:
        body()
    except ConfigError as exc:
        run_logger.error('config error: {}'.format(exc))
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        run_logger.error('{} failed in {}: {}: {}'.format(command, _component(exc), type(exc).__name__, exc))
        return EXIT_RUNTIME
    finally:
        close_logger(run_logger)
    return EXIT_OK


def _load(config_path, out, seeds):
    flat = load_flat(config_path, _overrides(out, seeds))
    build_config(flat)
    return flat


def cmd_run(config_path, out=None, seeds=None):
    try:
        flat = _load(config_path, out, seeds)
    except ConfigError as exc:
        logger.error('config error: {}'.format(exc))
        return EXIT_CONFIG

    def body():
        out_dir = flat['output.dir']
        jobs = [(flat, seed, out_dir) for seed in flat['seeds']]
        rows = []
        with MetricsWriter(os.path.join(out_dir, METRICS_FILE), METRICS_COLUMNS) as writer:
            for row in run_jobs(jobs):
                rows.append(row)
                writer.append(_formatted(row))
            for row in summary_rows(rows):
                writer.append(_formatted(row))
        logger.info('run_complete_{}_seeds'.format(len(rows)))

    return _guarded('run', body, flat)


def apply_axis(flat, axis, value):
    flat = dict(flat)
    if axis == 'beta':
        flat['attack.beta'] = float(value)
    elif axis == 'threshold_level':
        flat['defense.threshold_level'] = float(value)
    elif axis == 'measure':
        for key in ('attack.measure', 'defense.measure', 'analysis.measure'):
            flat[key] = _measure(value)
    elif axis == 'eps':
        flat['attack.eps'] = float(value)
        if value > 0:
            flat['attack.step_size'] = min(flat['attack.step_size'], float(value))
    elif axis == 'k':
        aux = flat['stream.burn_in_epochs'] - int(value)
        if aux < 0:
            raise ConfigError('sweep.k value {} exceeds stream.burn_in_epochs'.format(value))
        flat['stream.aux_epoch'] = aux
    else:
        raise ConfigError('unknown sweep axis {!r} (expected one of {})'.format(axis, ', '.join(SWEEP_AXES)))
    return flat


def cmd_sweep(config_path, axis, out=None, seeds=None):
    try:
        flat = _load(config_path, out, seeds)
        if axis not in SWEEP_AXES:
            raise ConfigError('unknown sweep axis {!r} (expected one of {})'.format(axis, ', '.join(SWEEP_AXES)))
        values = flat['sweep.' + axis]
        if not values:
            raise ConfigError('sweep.{} lists no values'.format(axis))
        variants = [(value, apply_axis(flat, axis, value)) for value in values]
        for _, variant in variants:
            build_config(variant)
    except ConfigError as exc:
        logger.error('config error: {}'.format(exc))
        return EXIT_CONFIG

    def body():
        out_dir = flat['output.dir']
        columns = ['axis_value'] + METRICS_COLUMNS
        jobs, groups = [], []
        for value, variant in variants:
            value_dir = os.path.join(out_dir, '{}_{}'.format(axis, value))
            groups.append((value, variant, value_dir))
            jobs.extend((variant, seed, value_dir) for seed in flat['seeds'])
        results = iter(run_jobs(jobs))
        with MetricsWriter(os.path.join(out_dir, 'sweep_{}.csv'.format(axis)), columns) as writer:
            for value, variant, value_dir in groups:
                rows = [next(results) for _ in flat['seeds']]
                for row in rows:
                    writer.append(_formatted(dict(row, axis_value=value)))
                for row in summary_rows(rows, prefix={'axis_value': value}):
                    writer.append(_formatted(row))
                if axis in ('k', 'measure'):
                    for seed in flat['seeds']:
                        analyze_seed(build_config(variant), seed, value_dir, interval_only=True)
        logger.info('sweep_{}_complete_{}_values'.format(axis, len(groups)))

    return _guarded('sweep', body, flat)


def _slope(k, values):
    k = np.asarray(k, dtype=np.float64)
    if k.size < 2 or np.all(k == k[0]):
        return None
    return float(np.polyfit(k, np.asarray(values, dtype=np.float64), 1)[0])


def analysis_poison(cfg, dataset, shape):
    """Poison generator for analyze: the accumulative attacker's batch crafted against the given parameters.

    The stream batch is the test split, the trigger base is the first training batch and the
    validation batch is the validation split. Black-box and adaptive settings are dropped so every
    checkpoint crafts against itself.
    """
    attack = replace(cfg.attack or AttackConfig(), beta=0.0, surrogate_step=None)
    clean = dataset.split('test')
    val = dataset.split('val')
    train = dataset.split('train')
    trigger = Batch(train.features[:cfg.stream.batch_size], train.labels[:cfg.stream.batch_size])

    def poison(params):
        return accumulative_perturb(clean, shape, params, val, trigger, attack)

    return clean, poison


def analyze_seed(cfg, seed, run_dir, interval_only=False):
    """Interval, OOD and correlation tables for one seed's saved burn-in checkpoints."""
    directory = seed_dir(run_dir, seed)
    store = load_store(directory)
    if len(store) < 2:
        raise CheckpointLookupError('{} holds only the initial checkpoint; nothing to analyze'.format(directory))
    dataset = make_dataset(cfg, seed)
    shape = model_shape(cfg, dataset)
    measure = Measure.parse(cfg.analysis.measure)
    anchor = store.newest if cfg.analysis.current_step is None else cfg.analysis.current_step
    current = store.fetch(by_id=anchor)
    depth = store.ids.index(anchor)
    k_list = cfg.analysis.k_list or list(range(1, max(depth, 2)))
    clean, poison = analysis_poison(cfg, dataset, shape)
    poison_batch = poison(current.params)
    table = interval_sweep(store, shape, clean, poison_batch, k_list, measure, anchor=anchor)
    write_sweep_csv(table, os.path.join(directory, 'interval.csv'))
    if interval_only:
        return None

    ood = gen_ood(dataset, cfg.analysis.ood_shift, cfg.analysis.ood_magnitude, component_seeds(seed)['ood'],
                  n=len(clean))
    ood_table = ood_compare(shape, store, clean, poison_batch, ood, k_list, measure, anchor=anchor)
    write_sweep_csv(ood_table, os.path.join(directory, 'ood.csv'))

    window = cfg.analysis.stable_window or list(range(1, max(depth // 2, 3) + 1))
    report = correlation_check(store, shape, clean, poison, window, measure, anchor=anchor)
    report.table.to_csv(os.path.join(directory, 'correlation.csv'), index=False, float_format=CSV_FLOAT_FORMAT)

    largest = table.iloc[-1]
    ratio = largest['mean_poison'] / largest['mean_clean'] if largest['mean_clean'] > 0 else None
    summary = {
        'seed': seed,
        'measure': measure.value,
        'spearman_clean_k': spearman(table['k'], table['mean_clean']),
        'ratio_poison_clean_max_k': ratio,
        'correlation': report.coefficient,
        'slope_poison': _slope(ood_table['k'], ood_table['mean_poison']),
        'slope_ood': _slope(ood_table['k'], ood_table['mean_ood']),
    }
    logger.info('analysis_seed{}_spearman_{}_ratio_{}_correlation_{}'.format(
        seed, summary['spearman_clean_k'], ratio, report.coefficient))
    return summary


def cmd_analyze(config_path, out=None, seeds=None):
    try:
        flat = _load(config_path, out, seeds)
        cfg = build_config(flat)
    except ConfigError as exc:
        logger.error('config error: {}'.format(exc))
        return EXIT_CONFIG

    def body():
        out_dir = flat['output.dir']
        summaries = [analyze_seed(cfg, seed, out_dir) for seed in cfg.seeds]
        pd.DataFrame(summaries, columns=SUMMARY_COLUMNS).to_csv(
            os.path.join(out_dir, SUMMARY_FILE), index=False, float_format=CSV_FLOAT_FORMAT)

    return _guarded('analyze', body, flat)


def cmd_gradcheck(seed_range, inject_fault=False, progress=False):
    try:
        seeds = parse_range(seed_range)
    except ValueError as exc:
        logger.error('config error: invalid seed range {!r}: {}'.format(seed_range, exc))
        return EXIT_CONFIG
    if not seeds:
        logger.warning('gradcheck: empty seed range, nothing to check')
        return EXIT_OK
    failures = 0
    with tqdm(seeds, desc='gradcheck', disable=not progress) as loop:
        for seed in loop:
            report = gradcheck(seed=seed, inject_fault=inject_fault)
            try:
                report.raise_for_failure()
            except GradcheckFailure as exc:
                failures += 1
                logger.error(str(exc))
            loop.set_postfix(failures=failures)
    if failures:
        logger.error('gradcheck: {} of {} seeds failed'.format(failures, len(seeds)))
        return EXIT_CHECK
    logger.info('gradcheck: {} seeds passed'.format(len(seeds)))
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog='stream_poison', description='Accumulative poisoning simulator')
    sub = parser.add_subparsers(dest='command', required=True)

    for name in ('run', 'sweep', 'analyze'):
        p = sub.add_parser(name)
        p.add_argument('--config', required=True)
        p.add_argument('--out', default=None)
        p.add_argument('--seeds', default=None, help="'a..b' or a comma list")
        if name == 'sweep':
            p.add_argument('--axis', required=True, choices=SWEEP_AXES)

    p = sub.add_parser('gradcheck')
    p.add_argument('--seeds', default='0..99')
    p.add_argument('--inject-fault', action='store_true')
    p.add_argument('--progress', action='store_true')
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.command == 'gradcheck':
        return cmd_gradcheck(args.seeds, inject_fault=args.inject_fault, progress=args.progress)
    if args.command == 'run':
        return cmd_run(args.config, out=args.out, seeds=args.seeds)
    if args.command == 'sweep':
        return cmd_sweep(args.config, args.axis, out=args.out, seeds=args.seeds)
    return cmd_analyze(args.config, out=args.out, seeds=args.seeds)


if __name__ == '__main__':
    sys.exit(main())
