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

import os
import shutil
import tempfile
from unittest import mock, TestCase

import numpy as np

from doob_lab.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, \
    ExperimentConfig, is_base_net, run
from doob_lab.engine import read_samples, THREADS_VARIABLE
from doob_lab.error import ConfigurationError
from doob_lab.nets import EpsNet
from doob_lab.util import read_csv

SAMPLE_CONFIG = """
[experiment]
seed = 7
benchmark = correlated-gaussian-2d

[schedule]
kind = linear
n_steps = 50
beta_1 = 1e-4
beta_N = 0.2

[strategy]
name = exact_h

[sampler]
n_chains = 3
"""


class testExperimentConfig(TestCase):
    def test_echo_sorted(self):
        config = ExperimentConfig.from_text(
            '[zeta]\nb = 2\na = 1\n[alpha]\nkey = value\n', seed=3)

        self.assertEqual(config.echo(), '[alpha]\nkey = value\n\n'
                         '[experiment]\nseed = 3\n\n'
                         '[zeta]\na = 1\nb = 2\n\n')

    def test_seed(self):
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_text('[experiment]\noutput = x\n')
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_text('[experiment]\nseed = seven\n')
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_text('[experiment]\nseed = -1\n')

        config = ExperimentConfig.from_text('[experiment]\nseed = 1\n',
                                            seed=5, out='results')
        self.assertEqual(config.seed, 5)
        self.assertEqual(config.path('a.csv'),
                         os.path.join('results', 'a.csv'))

    def test_access(self):
        config = ExperimentConfig.from_text(SAMPLE_CONFIG)

        self.assertEqual(config.get('schedule.beta_N'), '0.2')
        self.assertEqual(config.get('schedule.missing', 'x'), 'x')
        self.assertFalse(config.get_bool('sampler.store_trajectory'))
        self.assertEqual(config.section('nothing'), {})
        self.assertEqual(config.output, 'out')

        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_text('[experiment\nseed = 1\n')


class testCommands(TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.out = os.path.join(self.directory, 'out')

    def tearDown(self):
        shutil.rmtree(self.directory)

    def _run(self, command, text, *extra):
        pathname = os.path.join(self.directory, 'experiment.ini')
        with open(pathname, 'w') as f:
            f.write(text)
        return run([command, '--config', pathname, '--out', self.out]
                   + list(extra))

    def _read(self, name):
        with open(os.path.join(self.out, name), 'rb') as f:
            return f.read()

    def test_sample(self):
        self.assertEqual(self._run('sample', SAMPLE_CONFIG), EXIT_OK)

        samples = read_samples(os.path.join(self.out, 'samples.csv'))
        self.assertEqual(samples.shape, (3, 2))
        self.assertTrue(np.all(np.isfinite(samples)))

        meta = self._read('samples.csv.meta').decode('utf-8')
        self.assertTrue(meta.startswith('# doob_lab '))
        self.assertIn('# output samples.csv\n', meta)
        self.assertIn('[strategy]\nname = exact_h\n', meta)
        self.assertIn('beta_N = 0.2\n', meta)

    def test_config_errors(self):
        no_seed = SAMPLE_CONFIG.replace('seed = 7\n', '')
        self.assertEqual(self._run('sample', no_seed), EXIT_CONFIG)
        self.assertEqual(self._run('sample', no_seed, '--seed', '7'),
                         EXIT_OK)

        unknown = SAMPLE_CONFIG.replace('correlated-gaussian-2d', 'spiral')
        self.assertEqual(self._run('sample', unknown), EXIT_CONFIG)

        needs_net = SAMPLE_CONFIG.replace('exact_h', 'amortised')
        self.assertEqual(self._run('sample', needs_net), EXIT_CONFIG)

        strategy = SAMPLE_CONFIG.replace('exact_h', 'guesswork')
        self.assertEqual(self._run('sample', strategy), EXIT_CONFIG)

        self.assertEqual(run(['sample', '--config', os.path.join(
            self.directory, 'missing.ini')]), EXIT_CONFIG)

    def test_thread_independent(self):
        text = SAMPLE_CONFIG.replace('n_chains = 3', 'n_chains = 600')

        with mock.patch.dict(os.environ, {THREADS_VARIABLE: '1'}):
            self.assertEqual(self._run('sample', text), EXIT_OK)
        single = (self._read('samples.csv'), self._read('samples.csv.meta'))

        with mock.patch.dict(os.environ, {THREADS_VARIABLE: '3'}):
            self.assertEqual(self._run('sample', text), EXIT_OK)
        threaded = (self._read('samples.csv'),
                    self._read('samples.csv.meta'))

        self.assertEqual(single, threaded)

    def test_train_without_steps(self):
        text = SAMPLE_CONFIG + '\n[train]\nsteps = 0\n\n[net]\nhidden = 8\n'

        self.assertEqual(self._run('train', text), EXIT_OK)
        self.assertEqual(self._read('loss.csv').decode('ascii').strip(),
                         'step,loss')
        first = self._read('net.ckpt')

        self.assertEqual(self._run('train', text), EXIT_OK)
        self.assertEqual(self._read('net.ckpt'), first)
        self.assertTrue(os.path.exists(
            os.path.join(self.out, 'net.ckpt.meta')))

    def test_train_and_sample_network(self):
        checkpoint = os.path.join(self.directory, 'amortised.ckpt')
        text = SAMPLE_CONFIG.replace('exact_h', 'amortised') + (
            '\n[train]\nobjective = amortised\nsteps = 3\nbatch_size = 16\n'
            '\n[net]\nhidden = 8\ncheckpoint = {0}\n'.format(checkpoint))

        self.assertEqual(self._run('train', text), EXIT_OK)
        self.assertEqual(len(read_csv(os.path.join(self.out, 'loss.csv'))),
                         3)
        self.assertEqual(self._run('sample', text), EXIT_OK)

        samples = read_samples(os.path.join(self.out, 'samples.csv'))
        self.assertEqual(samples.shape, (3, 2))

    def test_divergence(self):
        text = SAMPLE_CONFIG + (
            '\n[train]\nsteps = 5\noptimizer = sgd\nlearning_rate = 1e300\n'
            '\n[net]\nhidden = 8\n')

        with np.errstate(all='ignore'):
            self.assertEqual(self._run('train', text), EXIT_DIVERGENCE)

    def test_eval(self):
        trajectories = os.path.join(self.out, 'trajectories.bin')
        text = """
[experiment]
seed = 11
benchmark = truncated-1d

[schedule]
n_steps = 40
beta_1 = 1e-3
beta_N = 0.2

[strategy]
name = exact_h

[sampler]
n_chains = 200
store_trajectory = true

[eval]
reference_samples = 2000
trajectories = {0}
""".format(trajectories)

        self.assertEqual(self._run('sample', text), EXIT_OK)
        self.assertEqual(self._run('eval', text), EXIT_OK)

        metrics = read_csv(os.path.join(self.out, 'metrics.csv'))
        self.assertEqual(len(metrics), 1)
        self.assertEqual(metrics['benchmark'][0], 'truncated-1d')
        self.assertEqual(metrics['n_samples'][0], 200)

        posterior = read_csv(os.path.join(self.out, 'posterior.csv'))
        self.assertEqual(posterior.colnames, ['x', 'density'])
        self.assertTrue(np.all(np.asarray(posterior['x']) >= 0.0))

        moments = read_csv(os.path.join(self.out, 'trajectory_moments.csv'))
        self.assertEqual(len(moments), 41)
        self.assertEqual(moments.colnames, ['k', 'mean_x0', 'var_x0'])

        for name in ('metrics.txt', 'metrics.csv.meta',
                     'posterior.csv.meta', 'trajectories.bin.meta'):
            self.assertTrue(os.path.exists(os.path.join(self.out, name)))

    def test_bench(self):
        text = """
[experiment]
seed = 2

[schedule]
n_steps = 20
beta_1 = 1e-3
beta_N = 0.3

[bench]
name = truncated-1d
strategies = exact_h, null
seeds = 1, 2
n_chains = 100
"""

        self.assertEqual(self._run('bench', text), EXIT_OK)

        table = read_csv(os.path.join(self.out, 'bench.csv'))
        self.assertEqual(len(table), 4)
        self.assertEqual(sorted(set(table['strategy'])), ['exact_h', 'null'])

        summary = read_csv(os.path.join(self.out, 'bench_summary.csv'))
        self.assertEqual(list(summary['strategy']), ['exact_h', 'null'])
        self.assertEqual(list(summary['n']), [2, 2])
        self.assertIn('sliced_w1_stderr', summary.colnames)

        first = self._read('bench_w1.svg')
        self.assertEqual(self._run('bench', text), EXIT_OK)
        self.assertEqual(self._read('bench_w1.svg'), first)
        self.assertTrue(os.path.exists(
            os.path.join(self.out, 'bench_samples.svg')))

    def test_bench_with_conditional_network(self):
        checkpoint = os.path.join(self.directory, 'amortised.ckpt')
        text = """
[experiment]
seed = 4
benchmark = correlated-gaussian-2d

[schedule]
n_steps = 20
beta_1 = 1e-3
beta_N = 0.3

[train]
objective = amortised
steps = 2
batch_size = 8

[net]
hidden = 8
checkpoint = {0}

[bench]
strategies = exact_h, replacement, amortised
seeds = 1
n_chains = 50
""".format(checkpoint)

        self.assertEqual(self._run('train', text), EXIT_OK)
        self.assertEqual(self._run('bench', text), EXIT_OK)

        table = read_csv(os.path.join(self.out, 'bench.csv'))
        self.assertEqual(list(table['strategy']),
                         ['exact_h', 'replacement', 'amortised'])


class testBaseNetwork(TestCase):
    def test_is_base_net(self):
        rng = np.random.default_rng(0)
        self.assertTrue(is_base_net(EpsNet(2, 20, hidden=(4,), rng=rng)))
        self.assertFalse(is_base_net(
            EpsNet(2, 20, hidden=(4,), rng=rng, condition_mode='mask')))
        self.assertFalse(is_base_net(
            EpsNet(2, 20, hidden=(4,), rng=rng, condition_mode='aux',
                   aux_dim=1)))
        self.assertFalse(is_base_net(
            EpsNet(2, 20, hidden=(4,), rng=rng,
                   per_coordinate_time=True)))
