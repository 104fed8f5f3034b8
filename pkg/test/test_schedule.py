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
from unittest import TestCase

import numpy as np
from scipy.integrate import trapezoid

from doob_lab.error import ConfigurationError, DomainError
from doob_lab.schedule import continuous_alpha_bar, continuous_beta, \
    make_cosine_schedule, make_linear_schedule, NoiseSchedule, ou_diffusion, \
    ou_drift, schedule_from_config


class testNoiseSchedule(TestCase):
    def test_linear_endpoints(self):
        schedule = make_linear_schedule(1000, 1e-4, 2e-2)

        self.assertEqual(schedule.n_steps, 1000)
        self.assertAlmostEqual(schedule.beta(1), 1e-4, places=15)
        self.assertAlmostEqual(schedule.beta(1000), 2e-2, places=15)
        self.assertEqual(schedule.alpha_bar(0), 1.0)
        self.assertEqual(len(schedule.betas), 1000)
        self.assertEqual(len(schedule.alpha_bars), 1000)

    def test_single_step(self):
        schedule = make_linear_schedule(1, 0.5, 0.5)

        self.assertEqual(list(schedule.betas), [0.5])
        self.assertEqual(list(schedule.alpha_bars), [0.5])

    def test_cumulative_product(self):
        schedule = make_linear_schedule(1000, 1e-4, 2e-2)

        exact = np.cumprod(1.0 - schedule.betas.astype(np.longdouble))
        np.testing.assert_allclose(schedule.alpha_bars,
                                   exact.astype(np.float64), rtol=1e-12)

        logs = np.exp(np.cumsum(np.log1p(-schedule.betas)))
        self.assertLess(np.max(np.abs(schedule.alpha_bars - logs)), 1e-10)

        ab = schedule.alpha_bars_with_origin
        np.testing.assert_allclose(ab[1:], ab[:-1] * (1.0 - schedule.betas),
                                   rtol=1e-12)
        self.assertTrue(np.all(np.diff(ab) < 0.0))

    def test_invalid_linear(self):
        for args in ((10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0),
                     (0, 0.1, 0.2), (2.5, 0.1, 0.2)):
            with self.assertRaises(ConfigurationError):
                make_linear_schedule(*args)

    def test_invalid_custom(self):
        with self.assertRaises(ConfigurationError):
            NoiseSchedule([0.1, 1.0])
        with self.assertRaises(ConfigurationError):
            NoiseSchedule([])
        with self.assertRaises(ConfigurationError):
            NoiseSchedule([0.1], kind='exponential')

    def test_step_domain(self):
        schedule = make_linear_schedule(10, 0.01, 0.1)

        with self.assertRaises(DomainError):
            schedule.beta(0)
        with self.assertRaises(DomainError):
            schedule.alpha_bar(11)
        with self.assertRaises(DomainError):
            schedule.alpha_bar(1.5)

        np.testing.assert_array_equal(
            schedule.alpha_bar(np.array([1, 3])),
            schedule.alpha_bars[[0, 2]])

    def test_cosine(self):
        schedule = make_cosine_schedule(1000)

        self.assertEqual(schedule.alpha_bar(0), 1.0)
        self.assertTrue(np.all(schedule.betas > 0.0))
        self.assertTrue(np.all(schedule.betas <= 0.999))

        schedule = make_cosine_schedule(100)
        self.assertTrue(np.all(np.diff(schedule.alpha_bars_with_origin) < 0))

    def test_transition_composition(self):
        schedule = make_linear_schedule(100, 1e-3, 0.05)

        (s1, v1) = schedule.transition(10, 40)
        (s2, v2) = schedule.transition(40, 90)
        (s, v) = schedule.transition(10, 90)

        self.assertAlmostEqual(s1 * s2, s, delta=1e-10)
        self.assertAlmostEqual(s2 * s2 * v1 + v2, v, delta=1e-10)

        (s0, v0) = schedule.transition(0, 40)
        self.assertAlmostEqual(s0 ** 2, schedule.alpha_bar(40), delta=1e-12)
        self.assertAlmostEqual(v0, 1.0 - schedule.alpha_bar(40), delta=1e-12)

        with self.assertRaises(DomainError):
            schedule.transition(40, 10)

    def test_from_config(self):
        schedule = schedule_from_config(
            {'kind': 'linear', 'n_steps': '20', 'beta_1': '0.001',
             'beta_N': '0.1'})
        self.assertEqual(schedule.n_steps, 20)
        self.assertAlmostEqual(schedule.beta(20), 0.1)

        schedule = schedule_from_config(schedule.to_config())
        self.assertEqual(schedule.n_steps, 20)

        self.assertEqual(
            schedule_from_config({'kind': 'cosine', 'n_steps': '30'}).kind,
            'cosine')

        with self.assertRaises(ConfigurationError):
            schedule_from_config({'kind': 'sigmoid'})
        with self.assertRaises(ConfigurationError):
            schedule_from_config({'kind': 'linear', 'n_steps': 'many'})


class testContinuousTime(TestCase):
    def test_constant_rate(self):
        n = 100
        c = 2.0
        schedule = NoiseSchedule([c / n] * n)

        for t in (0.1, 0.37, 0.5, 0.9):
            self.assertAlmostEqual(continuous_beta(schedule, t), c,
                                   delta=0.03 * c)

    def test_integral(self):
        schedule = make_linear_schedule(1000, 1e-4, 2e-2)
        t = np.linspace(0.0, 1.0, 100001)

        integral = trapezoid(continuous_beta(schedule, t), t)
        target = -math.log(schedule.alpha_bar(1000))

        self.assertAlmostEqual(integral / target, 1.0, delta=1e-3)

    def test_single_step(self):
        schedule = make_linear_schedule(1, 0.3, 0.3)

        self.assertAlmostEqual(continuous_beta(schedule, 0.5),
                               -math.log(0.7), places=14)

    def test_domain(self):
        schedule = make_linear_schedule(10, 0.01, 0.1)

        with self.assertRaises(DomainError):
            continuous_beta(schedule, 1.5)
        with self.assertRaises(DomainError):
            continuous_alpha_bar(schedule, -0.1)

    def test_alpha_bar_on_grid(self):
        schedule = make_linear_schedule(50, 1e-3, 0.1)

        for k in (0, 7, 25, 50):
            self.assertAlmostEqual(continuous_alpha_bar(schedule, k / 50.0),
                                   schedule.alpha_bar(k), delta=1e-12)

    def test_ou_coefficients(self):
        schedule = make_linear_schedule(50, 1e-3, 0.1)
        x = np.array([1.0, -2.0])
        beta = continuous_beta(schedule, 0.4)

        np.testing.assert_allclose(ou_drift(schedule, 0.4, x),
                                   -0.5 * beta * x)
        self.assertAlmostEqual(ou_diffusion(schedule, 0.4), math.sqrt(beta))
