# Copyright (C) 2026 The doob_lab developers.
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <http://www.gnu.org/licenses/>.

import argparse
import configparser
import io
import logging
import os.path

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from doob_lab.conditioning import Amortised, ClassifierFree, ExactH, \
    FinetunedH, GuidanceSchedule, NullStrategy, ReconGuidance, Repaint, \
    Replacement, RFDiffSample, STRATEGIES
from doob_lab.engine import block_rngs, read_samples, read_trajectories, \
    sample, sampler_config_from_config, SamplerConfig, write_samples, \
    write_trajectories
from doob_lab.error import ConfigurationError, DivergenceError, DoobLabError
from doob_lab.eval import Benchmark, compare_samples, get_benchmark, \
    quadrature_posterior_1d, reports_table, summarise
from doob_lab.nets import bernoulli_masks, EpsNet, finetune_control, \
    finetune_offline, load_checkpoint, save_checkpoint, \
    train_amortised, train_classifier_free, train_config_from_config, \
    train_rfdiff_style, train_unconditional
from doob_lab.oracle import Interval, Observation, \
    observation_from_config, OracleScoreModel, prior_from_config
from doob_lab.schedule import schedule_from_config
from doob_lab.util import atomic_path, configure_logger, write_csv, \
    write_meta, write_summary

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3

OBJECTIVES = ('unconditional', 'amortised', 'classifier_free', 'rfdiff',
              'offline', 'control')
NET_STRATEGIES = ('amortised', 'classifier_free', 'rfdiff')

matplotlib.rcParams['svg.hashsalt'] = 'doob-lab'


class ExperimentConfig(object):
    """
    Experiment settings read from an INI file.

    Keys are addressed as "section.key".  The seed is mandatory and may
    be supplied (or overridden) on the command line.
    """

    def __init__(self, parser):
        self.parser = parser

        if self.get('experiment.seed') is None:
            raise ConfigurationError(
                'experiment.seed is required (or give --seed)')
        try:
            self.seed = int(self.get('experiment.seed'))
        except ValueError:
            raise ConfigurationError('experiment.seed must be an integer')
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError('experiment.seed must fit in 64 bits')

    @classmethod
    def from_text(cls, text, seed=None, out=None):
        parser = configparser.ConfigParser(interpolation=None)
        # Keys such as schedule.beta_N are case sensitive.
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigurationError('invalid configuration: {0}'.format(e))

        if not parser.has_section('experiment'):
            parser.add_section('experiment')
        if seed is not None:
            parser.set('experiment', 'seed', str(seed))
        if out is not None:
            parser.set('experiment', 'output', out)

        return cls(parser)

    @classmethod
    def from_file(cls, pathname, seed=None, out=None):
        if not os.path.isfile(pathname):
            raise ConfigurationError(
                'configuration file {0} not found'.format(pathname))
        with open(pathname, 'r') as f:
            return cls.from_text(f.read(), seed=seed, out=out)

    def get(self, key, default=None):
        (section, option) = key.split('.', 1)
        return self.parser.get(section, option, fallback=default)

    def get_bool(self, key, default=False):
        value = self.get(key)
        if value is None:
            return default
        return value.strip().lower() in ('1', 'true', 'yes', 'on')

    def section(self, name):
        if not self.parser.has_section(name):
            return {}
        return dict(self.parser.items(name))

    @property
    def output(self):
        return self.get('experiment.output', 'out')

    def path(self, name):
        return os.path.join(self.output, name)

    def echo(self):
        """
        The resolved configuration as INI text with sorted sections and
        keys.
        """

        buff = io.StringIO()
        for section in sorted(self.parser.sections()):
            buff.write('[{0}]\n'.format(section))
            for (key, value) in sorted(self.parser.items(section)):
                buff.write('{0} = {1}\n'.format(key, value))
            buff.write('\n')
        return buff.getvalue()


def _floats(text):
    return [float(v) for v in text.split(',') if v.strip()]


def _ints(text):
    return [int(v) for v in text.split(',') if v.strip()]


def problem(config):
    """
    Return the benchmark described by the configuration: a registered
    benchmark named by experiment.benchmark, or the prior and
    observation sections.
    """

    name = config.get('experiment.benchmark')
    if name and not config.parser.has_section('prior'):
        return get_benchmark(name)

    prior = prior_from_config(config.section('prior'))
    event = observation_from_config(config.section('observation'))
    return Benchmark(name or 'custom', prior, event,
                     'configured prior and observation')


def _net_from_config(config, dim, n_steps, condition_mode='none',
                     per_coordinate_time=False):
    try:
        hidden = _ints(config.get('net.hidden', '128,128'))
        aux_dim = int(config.get('net.aux_dim', 1))
    except ValueError as e:
        raise ConfigurationError('invalid net configuration: {0}'.format(e))

    return EpsNet(dim, n_steps, hidden=hidden, condition_mode=condition_mode,
                  aux_dim=aux_dim, per_coordinate_time=per_coordinate_time,
                  rng=block_rngs(config.seed, 3)[2])


def _load_net(config, key, schedule):
    pathname = config.get(key)
    if not pathname:
        raise ConfigurationError('{0} is required'.format(key))
    if not os.path.isfile(pathname):
        raise ConfigurationError(
            'checkpoint {0} does not exist'.format(pathname))

    (net, _) = load_checkpoint(pathname)
    if net.n_steps != schedule.n_steps:
        raise ConfigurationError(
            '{0} was trained for {1} steps, the schedule has {2}'.format(
                pathname, net.n_steps, schedule.n_steps))
    return net


def run_train(config):
    """
    Train the network selected by train.objective and write the
    checkpoint and the loss curve.
    """

    schedule = schedule_from_config(config.section('schedule'))
    bench = problem(config)
    prior = bench.prior
    tcfg = train_config_from_config(config.section('train'), config.seed)
    objective = config.get('train.objective', 'unconditional')
    masks = bernoulli_masks(tcfg.mask_probability)

    if objective == 'unconditional':
        (net, losses) = train_unconditional(
            _net_from_config(config, prior.dim, schedule.n_steps),
            prior.sample, schedule, tcfg)

    elif objective == 'amortised':
        (net, losses) = train_amortised(
            _net_from_config(config, prior.dim, schedule.n_steps, 'mask'),
            prior.sample, masks, schedule, tcfg)

    elif objective == 'classifier_free':
        # The auxiliary variable is the mixture component of each draw.
        def joint(rng, n):
            (x, labels) = prior.sample(rng, n, return_labels=True)
            return (x, labels[:, None].astype(np.float64))

        (net, losses) = train_classifier_free(
            _net_from_config(config, prior.dim, schedule.n_steps, 'aux'),
            joint, schedule, tcfg)

    elif objective == 'rfdiff':
        (net, losses) = train_rfdiff_style(
            _net_from_config(config, prior.dim, schedule.n_steps,
                             per_coordinate_time=True),
            prior.sample, masks, schedule, tcfg)

    elif objective == 'offline':
        frozen = _load_net(config, 'net.frozen_checkpoint', schedule)
        (net, losses) = finetune_offline(
            frozen,
            _net_from_config(config, prior.dim, schedule.n_steps, 'mask'),
            prior.sample, masks, schedule, tcfg)

    elif objective == 'control':
        if not isinstance(bench.event, Observation):
            raise ConfigurationError(
                'control finetuning needs a soft observation')
        frozen = _load_net(config, 'net.frozen_checkpoint', schedule)
        (net, losses) = finetune_control(
            frozen, _net_from_config(config, prior.dim, schedule.n_steps),
            bench.event, schedule, tcfg)

    else:
        raise ConfigurationError(
            'unknown training objective "{0}"; choose from {1}'.format(
                objective, ', '.join(OBJECTIVES)))

    echo = config.echo()
    checkpoint = config.get('net.checkpoint', config.path('net.ckpt'))
    save_checkpoint(checkpoint, net, echo)
    write_meta(checkpoint, echo)

    losscsv = config.path('loss.csv')
    write_csv(losscsv, [np.arange(1, losses.size + 1), losses],
              ['step', 'loss'])
    write_meta(losscsv, echo)

    return (net, losses)


def build_strategy(config, bench, schedule, h_net=None, name=None):
    """
    Construct the conditioning strategy named by strategy.name.
    """

    name = name or config.get('strategy.name', 'null')
    event = bench.event

    def observation():
        if not isinstance(event, Observation):
            raise ConfigurationError(
                'strategy "{0}" needs an observation'.format(name))
        return event

    try:
        if name == 'null':
            return NullStrategy()
        elif name == 'exact_h':
            if event is None:
                raise ConfigurationError('exact h sampling needs an event')
            return ExactH(bench.h_transform(schedule))
        elif name == 'recon_guidance':
            obs = observation()
            gsched = GuidanceSchedule(
                config.get('guidance.kind', 'constant'),
                float(config.get('guidance.gamma', 1.0)),
                noise_std=obs.noise_std)
            return ReconGuidance(
                obs, gsched,
                stop_gradient=config.get_bool('guidance.stop_gradient'))
        elif name == 'replacement':
            return Replacement(observation())
        elif name == 'repaint':
            return Repaint(observation(), int(config.get('repaint.R', 1)),
                           renoise=config.get('repaint.renoise', 'previous'))
        elif name == 'rfdiff':
            return RFDiffSample(observation())
        elif name == 'amortised':
            return Amortised(observation())
        elif name == 'classifier_free':
            return ClassifierFree(
                _floats(config.get('classifier_free.y', '0')),
                float(config.get('classifier_free.weight', 0.0)))
        elif name == 'finetuned_h':
            if h_net is None:
                raise ConfigurationError(
                    'finetuned h sampling needs net.checkpoint')
            if h_net.condition_mode == 'mask':
                return FinetunedH.for_observation(h_net, observation())
            return FinetunedH(h_net)

    except ValueError as e:
        raise ConfigurationError(
            'invalid strategy configuration: {0}'.format(e))

    raise ConfigurationError(
        'unknown strategy "{0}"; choose from {1}'.format(
            name, ', '.join(sorted(STRATEGIES))))


def _model_and_strategy(config, bench, schedule, name=None):
    """
    Pick the score model for the configured strategy: the checkpointed
    network for network strategies, otherwise the frozen network or the
    analytic oracle.
    """

    name = name or config.get('strategy.name', 'null')
    h_net = None
    model = None

    if name in NET_STRATEGIES:
        model = _load_net(config, 'net.checkpoint', schedule)
    else:
        if config.get('net.frozen_checkpoint'):
            model = _load_net(config, 'net.frozen_checkpoint', schedule)
        elif config.get('net.checkpoint') and name != 'finetuned_h':
            net = _load_net(config, 'net.checkpoint', schedule)
            if is_base_net(net):
                model = net
            else:
                logger.info('%r is not an unconditional network, '
                            'using the analytic prior score for %s',
                            net, name)
        if model is None:
            model = OracleScoreModel(bench.prior, schedule)
        if name == 'finetuned_h':
            h_net = _load_net(config, 'net.checkpoint', schedule)

    return (model, build_strategy(config, bench, schedule, h_net, name))


def is_base_net(net):
    """
    Can the network serve as the unconditional base model of the
    sampling-time strategies?
    """

    return net.condition_mode == 'none' and not net.per_coordinate_time


def run_sample(config):
    """
    Sample with the configured strategy and write samples.csv (and
    trajectories.bin when requested).
    """

    schedule = schedule_from_config(config.section('schedule'))
    bench = problem(config)
    (model, strategy) = _model_and_strategy(config, bench, schedule)
    cfg = sampler_config_from_config(config.section('sampler'), config.seed)

    batch = sample(model, schedule, strategy, cfg)

    echo = config.echo()
    samplecsv = config.path('samples.csv')
    write_samples(samplecsv, batch)
    write_meta(samplecsv, echo)

    if cfg.store_trajectory:
        trajfile = config.path('trajectories.bin')
        write_trajectories(trajfile, batch.trajectories)
        write_meta(trajfile, echo)

    return batch


def run_eval(config):
    """
    Score a samples file against exact posterior samples and write
    metrics.csv, metrics.txt and, for one-dimensional problems,
    posterior.csv.
    """

    bench = problem(config)
    samples = read_samples(config.get('eval.samples',
                                      config.path('samples.csv')))
    if samples.shape[1] != bench.dim:
        raise ConfigurationError(
            'samples have dimension {0}, the problem has {1}'.format(
                samples.shape[1], bench.dim))

    try:
        n_reference = int(config.get('eval.reference_samples', 10000))
        tau = float(config.get('eval.tau', 0.1))
        n_projections = int(config.get('eval.n_projections', 100))
    except ValueError as e:
        raise ConfigurationError('invalid eval configuration: {0}'.format(e))

    (ref_rng, proj_rng) = block_rngs(config.seed, 2)
    if bench.event is None:
        reference = bench.prior.sample(ref_rng, n_reference)
    else:
        reference = bench.reference(ref_rng, n_reference)

    report = compare_samples(samples, reference, proj_rng, obs=bench.event,
                             tau=tau, n_projections=n_projections,
                             seed=config.seed)
    if report.n_aborted:
        logger.warning('%d aborted chain(s) excluded from the metrics',
                       report.n_aborted)

    echo = config.echo()
    row = dict(benchmark=bench.name, seed=config.seed)
    row.update(report.as_row())
    table = reports_table([row])

    metricscsv = config.path('metrics.csv')
    write_csv(metricscsv, [table[n] for n in table.colnames], table.colnames)
    write_meta(metricscsv, echo)
    write_summary(config.path('metrics.txt'), table)

    if bench.dim == 1 and (isinstance(bench.event, Interval) or (
            isinstance(bench.event, Observation)
            and not bench.event.is_hard)):
        center = float(reference.mean())
        spread = 10.0 * float(reference.std()) + 1.0
        posterior = quadrature_posterior_1d(
            bench.prior, bench.event,
            (center - spread, center + spread, 4001))
        postcsv = config.path('posterior.csv')
        write_csv(postcsv, [posterior.grid, posterior.density],
                  ['x', 'density'])
        write_meta(postcsv, echo)

    trajfile = config.get('eval.trajectories')
    if trajfile:
        trajectories = read_trajectories(trajfile)
        momentcsv = config.path('trajectory_moments.csv')
        write_trajectory_moments(momentcsv, trajectories)
        write_meta(momentcsv, echo)

    return report


def write_trajectory_moments(pathname, trajectories):
    """
    Per-step mean and variance of every coordinate over the chains that
    stayed finite.
    """

    finite = np.all(np.isfinite(trajectories), axis=(1, 2))
    kept = trajectories[finite]
    n_times = trajectories.shape[1]
    dim = trajectories.shape[2]

    columns = [np.arange(n_times)]
    names = ['k']
    for i in range(dim):
        columns.extend([kept[:, :, i].mean(axis=0), kept[:, :, i].var(axis=0)])
        names.extend(['mean_x{0}'.format(i), 'var_x{0}'.format(i)])

    write_csv(pathname, columns, names)


def run_bench(config):
    """
    Compare strategies on a registered benchmark over several seeds and
    write bench.csv, bench_summary.csv, bench_summary.txt and SVG plots.
    """

    name = config.get('bench.name', config.get('experiment.benchmark'))
    if not name:
        raise ConfigurationError('bench.name is required')
    bench = get_benchmark(name)
    schedule = schedule_from_config(config.section('schedule'))

    try:
        strategies = [s.strip() for s in config.get(
            'bench.strategies', 'exact_h').split(',') if s.strip()]
        seeds = _ints(config.get('bench.seeds', ','.join(
            str(config.seed + i) for i in range(5))))
        n_chains = int(config.get('bench.n_chains', 4000))
        tau = float(config.get('eval.tau', 0.1))
        n_projections = int(config.get('eval.n_projections', 100))
        sigma_rule = config.get('sampler.sigma_rule', 'sqrt_beta')
    except ValueError as e:
        raise ConfigurationError('invalid bench configuration: {0}'.format(e))

    rows = []
    shown = {}
    reference_shown = None

    for strategy_name in strategies:
        (model, strategy) = _model_and_strategy(config, bench, schedule,
                                                strategy_name)

        for seed in seeds:
            cfg = SamplerConfig(n_chains, seed, sigma_rule=sigma_rule)
            batch = sample(model, schedule, strategy, cfg)
            (ref_rng, proj_rng) = block_rngs(seed, 2)
            reference = bench.reference(ref_rng, n_chains)
            report = compare_samples(
                batch.final, reference, proj_rng, obs=bench.event, tau=tau,
                n_projections=n_projections, seed=seed)

            row = dict(benchmark=bench.name, strategy=strategy_name,
                       seed=seed)
            row.update(report.as_row())
            rows.append(row)

            if strategy_name not in shown:
                shown[strategy_name] = batch.valid()
                if reference_shown is None:
                    reference_shown = reference

    echo = config.echo()
    table = reports_table(rows)
    benchcsv = config.path('bench.csv')
    write_csv(benchcsv, [table[n] for n in table.colnames], table.colnames)
    write_meta(benchcsv, echo)

    summary = summarise(table)
    summarycsv = config.path('bench_summary.csv')
    write_csv(summarycsv, [summary[n] for n in summary.colnames],
              summary.colnames)
    write_meta(summarycsv, echo)
    write_summary(config.path('bench_summary.txt'), summary)

    plot_metric_bars(config.path('bench_w1.svg'), summary, 'sliced_w1',
                     bench.name)
    plot_samples(config.path('bench_samples.svg'), shown, reference_shown,
                 bench.name)

    return table


def _save_svg(fig, pathname):
    with atomic_path(pathname) as tmpname:
        fig.savefig(tmpname, format='svg', metadata={'Date': None})
    plt.close(fig)


def plot_metric_bars(pathname, summary, metric, title):
    """
    Bar chart of a metric's mean per strategy with standard-error bars.
    """

    fig = plt.figure(figsize=(6, 4))
    ax = fig.add_subplot(1, 1, 1)
    labels = [str(s) for s in summary['strategy']]
    positions = np.arange(len(labels))
    ax.bar(positions, summary[metric + '_mean'],
           yerr=summary[metric + '_stderr'], capsize=4, color='tab:blue')
    ax.set_xticks(positions)
    ax.set_xticklabels(labels, rotation=30, ha='right')
    ax.set_ylabel(metric)
    ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, pathname)


def plot_samples(pathname, shown, reference, title):
    """
    Per-strategy sample plots against the reference: histograms in one
    dimension, scatter plots of the first two coordinates otherwise.
    """

    n = max(len(shown), 1)
    fig = plt.figure(figsize=(3.5 * n, 3.5))

    for (i, (name, samples)) in enumerate(sorted(shown.items())):
        ax = fig.add_subplot(1, n, i + 1)
        if samples.shape[1] == 1:
            bins = np.linspace(min(samples.min(), reference.min()),
                               max(samples.max(), reference.max()), 60)
            ax.hist(reference[:, 0], bins=bins, density=True,
                    histtype='step', color='black', label='exact')
            ax.hist(samples[:, 0], bins=bins, density=True, alpha=0.5,
                    color='tab:orange', label=name)
        else:
            ax.scatter(reference[:, 0], reference[:, 1], s=1,
                       color='black', alpha=0.3, label='exact')
            ax.scatter(samples[:, 0], samples[:, 1], s=1,
                       color='tab:orange', alpha=0.3, label=name)
        ax.set_title('{0}: {1}'.format(title, name), fontsize=8)
        ax.legend(fontsize=7)

    fig.tight_layout()
    _save_svg(fig, pathname)


COMMANDS = {
    'train': run_train,
    'sample': run_sample,
    'eval': run_eval,
    'bench': run_bench,
}


def run(argv=None):
    """
    Entry point of the doob-lab command.  Returns the exit status.
    """

    ap = argparse.ArgumentParser(
        prog='doob-lab',
        description='conditional diffusion sampling experiments')
    ap.add_argument('command',
                    choices=sorted(COMMANDS),
                    help='subcommand to run')
    ap.add_argument('--config',
                    required=True,
                    help='experiment configuration (INI file)')
    ap.add_argument('--seed',
                    type=int,
                    help='run seed, overriding experiment.seed')
    ap.add_argument('--out',
                    help='output directory, overriding experiment.output')
    ap.add_argument('-v', '--verbose',
                    action='store_true',
                    help='output extra information')
    a = ap.parse_args(argv)

    configure_logger(logging.DEBUG if a.verbose else logging.INFO)

    try:
        config = ExperimentConfig.from_file(a.config, seed=a.seed, out=a.out)
        COMMANDS[a.command](config)

    except ConfigurationError as e:
        logger.error('configuration error: %s', e)
        return EXIT_CONFIG

    except DivergenceError as e:
        logger.error('training diverged: %s', e)
        return EXIT_DIVERGENCE

    except DoobLabError as e:
        logger.error('%s', e)
        return EXIT_ERROR

    except Exception:
        logger.exception('unexpected error running %s', a.command)
        raise

    return EXIT_OK
