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

import math
import os
import shutil
import tempfile
from unittest import mock, TestCase

import numpy as np

from doob_lab.engine import block_rngs, BLOCK_SIZE, forward_noise, \
    read_samples, read_trajectories, reverse_step, sample, SampleBatch, \
    sampler_config_from_config, SamplerConfig, ScoreModel, thread_count, \
    THREADS_VARIABLE, write_samples, write_trajectories
from doob_lab.error import ConfigurationError, DomainError
from doob_lab.eval import wasserstein1_1d
from doob_lab.oracle import GaussianMixturePrior, OracleScoreModel
from doob_lab.schedule import make_linear_schedule, NoiseSchedule


class NaNModel(ScoreModel):
    """Breaks, on the first step, every chain starting with x0 > 0."""

    dim = 2
    first_step = 5

    def eps(self, x, k, condition=None, coord_times=None):
        out = np.zeros_like(x)
        if k == self.first_step:
            out[x[:, 0] > 0.0] = np.nan
        return out


class testForwardNoise(TestCase):
    def test_time_zero(self):
        schedule = make_linear_schedule(10, 1e-3, 0.1)
        x0 = np.arange(6.0).reshape(3, 2)
        (x, _) = forward_noise(schedule, 0, x0, np.random.default_rng(0))

        np.testing.assert_array_equal(x, x0)

    def test_given_noise(self):
        schedule = NoiseSchedule([0.75])
        (x, eps) = forward_noise(schedule, 1, np.array([[2.0]]), None,
                                 eps=np.array([[1.0]]))

        self.assertAlmostEqual(x[0, 0], 1.0 + math.sqrt(0.75))
        self.assertEqual(eps[0, 0], 1.0)

    def test_moments(self):
        schedule = NoiseSchedule([0.75])
        x0 = np.full((100000, 1), 2.0)
        (x, _) = forward_noise(schedule, 1, x0, np.random.default_rng(4))

        self.assertAlmostEqual(x.mean(), 1.0, delta=0.01)
        self.assertAlmostEqual(x.var(), 0.75, delta=0.01)

    def test_per_row_steps(self):
        schedule = make_linear_schedule(10, 1e-3, 0.1)
        x0 = np.ones((3, 2))
        k = np.array([0, 5, 10])
        (x, _) = forward_noise(schedule, k, x0, None, eps=np.zeros((3, 2)))

        np.testing.assert_allclose(
            x[:, 0], np.sqrt(schedule.alpha_bar(k)))


class testReverseStep(TestCase):
    def setUp(self):
        self.schedule = make_linear_schedule(50, 1e-3, 0.2)
        self.cfg = SamplerConfig(10, 1)

    def test_final_step_deterministic(self):
        x = np.array([[0.3, -0.2]])
        eps = np.array([[0.1, 0.4]])
        a = reverse_step(self.schedule, 1, x, eps,
                         np.random.default_rng(1), self.cfg)
        b = reverse_step(self.schedule, 1, x, eps,
                         np.random.default_rng(2), self.cfg)

        np.testing.assert_array_equal(a, b)

        beta = self.schedule.beta(1)
        expected = ((x - beta / math.sqrt(1.0 - self.schedule.alpha_bar(1))
                     * eps) / math.sqrt(1.0 - beta))
        np.testing.assert_allclose(a, expected)

    def test_noise_scale(self):
        x = np.zeros((50000, 1))
        k = 30
        wide = reverse_step(self.schedule, k, x, x,
                            np.random.default_rng(3), self.cfg)
        narrow = reverse_step(self.schedule, k, x, x,
                              np.random.default_rng(3),
                              SamplerConfig(10, 1, sigma_rule='beta'))

        beta = self.schedule.beta(k)
        self.assertAlmostEqual(wide.std(), math.sqrt(beta), delta=0.01)
        np.testing.assert_allclose(narrow, wide * math.sqrt(beta))

    def test_domain(self):
        x = np.zeros((1, 1))
        with self.assertRaises(DomainError):
            reverse_step(self.schedule, 0, x, x, None, self.cfg)
        with self.assertRaises(DomainError):
            reverse_step(self.schedule, 51, x, x, None, self.cfg)


class testSampler(TestCase):
    def setUp(self):
        self.schedule = make_linear_schedule(200, 1e-4, 0.1)
        self.gaussian = OracleScoreModel(
            GaussianMixturePrior.gaussian([0.0], [[1.0]]), self.schedule)

    def test_gaussian_stationary(self):
        batch = sample(self.gaussian, self.schedule, None,
                       SamplerConfig(20000, 42))
        x = batch.final[:, 0]

        self.assertEqual(batch.n_aborted, 0)
        self.assertLess(abs(x.mean()), 3.0 * math.sqrt(1.0 / x.size))
        self.assertLess(abs(x.var() - 1.0), 3.0 * math.sqrt(2.0 / x.size))

    def test_mixture_prior(self):
        schedule = make_linear_schedule(1000, 1e-4, 2e-2)
        prior = GaussianMixturePrior([0.3, 0.7], [[-2.0], [1.5]],
                                     variances=[[0.25], [0.5]])
        model = OracleScoreModel(prior, schedule)

        batch = sample(model, schedule, None, SamplerConfig(4000, 7))
        reference = prior.sample(np.random.default_rng(8), 20000)

        self.assertLess(wasserstein1_1d(batch.final, reference), 0.06)

    def test_deterministic(self):
        cfg = SamplerConfig(3 * BLOCK_SIZE - 10, 99)
        a = sample(self.gaussian, self.schedule, None, cfg)
        b = sample(self.gaussian, self.schedule, None, cfg)
        c = sample(self.gaussian, self.schedule, None,
                   SamplerConfig(cfg.n_chains, 100))

        np.testing.assert_array_equal(a.final, b.final)
        self.assertFalse(np.array_equal(a.final, c.final))
        np.testing.assert_array_equal(
            a.seeds, np.repeat([0, 1, 2], [256, 256, 246]))

    def test_thread_independent(self):
        cfg = SamplerConfig(3 * BLOCK_SIZE, 5)

        with mock.patch.dict(os.environ, {THREADS_VARIABLE: '1'}):
            single = sample(self.gaussian, self.schedule, None, cfg)
        with mock.patch.dict(os.environ, {THREADS_VARIABLE: '3'}):
            threaded = sample(self.gaussian, self.schedule, None, cfg)

        np.testing.assert_array_equal(single.final, threaded.final)

    def test_trajectories(self):
        cfg = SamplerConfig(5, 3, store_trajectory=True)
        batch = sample(self.gaussian, self.schedule, None, cfg)

        self.assertEqual(batch.trajectories.shape, (5, 201, 1))
        np.testing.assert_array_equal(batch.trajectories[:, 0], batch.final)

        start = block_rngs(3, 1)[0].standard_normal((5, 1))
        np.testing.assert_array_equal(batch.trajectories[:, 200], start)

    def test_aborted_chains(self):
        schedule = make_linear_schedule(5, 1e-3, 0.1)
        batch = sample(NaNModel(), schedule, None, SamplerConfig(100, 11))

        start = block_rngs(11, 1)[0].standard_normal((100, 2))
        expected = start[:, 0] > 0.0

        np.testing.assert_array_equal(batch.aborted, expected)
        self.assertTrue(np.all(np.isnan(batch.final[expected])))
        self.assertEqual(batch.valid().shape, (100 - expected.sum(), 2))
        self.assertTrue(np.all(np.isfinite(batch.valid())))

    def test_aborted_trajectories(self):
        schedule = make_linear_schedule(5, 1e-3, 0.1)
        batch = sample(NaNModel(), schedule, None,
                       SamplerConfig(100, 11, store_trajectory=True))
        broken = batch.aborted

        self.assertTrue(broken.any())
        self.assertTrue(np.all(np.isfinite(batch.trajectories[broken, 5])))
        self.assertTrue(np.all(np.isnan(batch.trajectories[broken, :5])))
        self.assertTrue(np.all(np.isfinite(batch.trajectories[~broken])))

    def test_block_streams(self):
        a = block_rngs(17, 2)[1].standard_normal(4)
        b = block_rngs(17, 5)[1].standard_normal(4)

        np.testing.assert_array_equal(a, b)


class testSamplerConfig(TestCase):
    def test_validation(self):
        with self.assertRaises(ConfigurationError):
            SamplerConfig(0, 1)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(10, None)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(10, -1)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(10, 2 ** 64)
        with self.assertRaises(ConfigurationError):
            SamplerConfig(10, 1, sigma_rule='zero')

    def test_from_config(self):
        cfg = sampler_config_from_config(
            {'n_chains': '12', 'store_trajectory': 'yes',
             'sigma_rule': 'beta'}, 4)

        self.assertEqual(cfg, SamplerConfig(12, 4, True, 'beta'))

        with self.assertRaises(ConfigurationError):
            sampler_config_from_config({'n_chains': 'many'}, 4)

    def test_thread_count(self):
        with mock.patch.dict(os.environ, {THREADS_VARIABLE: ''}):
            self.assertEqual(thread_count(), 1)
        with mock.patch.dict(os.environ, {THREADS_VARIABLE: '4'}):
            self.assertEqual(thread_count(), 4)

        for value in ('0', 'lots'):
            with mock.patch.dict(os.environ, {THREADS_VARIABLE: value}):
                with self.assertRaises(ConfigurationError):
                    thread_count()


class testSampleFiles(TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_samples(self):
        final = np.array([[0.125, -1.5], [2.0, 3.25], [0.0, 1e-3]])
        pathname = os.path.join(self.directory, 'samples.csv')
        write_samples(pathname, SampleBatch(final))

        with open(pathname) as f:
            self.assertEqual(f.readline().strip(), 'x0,x1')

        np.testing.assert_array_equal(read_samples(pathname), final)

    def test_trajectories(self):
        trajectories = np.arange(24.0).reshape(2, 3, 4)
        pathname = os.path.join(self.directory, 'trajectories.bin')
        write_trajectories(pathname, trajectories)

        self.assertEqual(os.path.getsize(pathname), 8 + 24 + 24 * 8)
        np.testing.assert_array_equal(read_trajectories(pathname),
                                      trajectories)

        with self.assertRaises(DomainError):
            write_trajectories(pathname, np.zeros((2, 3)))

    def test_bad_files(self):
        pathname = os.path.join(self.directory, 'bad.bin')
        with open(pathname, 'wb') as f:
            f.write(b'NOTATRAJ' + b'\0' * 24)
        with self.assertRaises(ConfigurationError):
            read_trajectories(pathname)

        write_trajectories(pathname, np.zeros((2, 2, 2)))
        with open(pathname, 'r+b') as f:
            f.truncate(8 + 24 + 16)
        with self.assertRaises(ConfigurationError):
            read_trajectories(pathname)
