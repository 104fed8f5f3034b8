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

import logging
import math

from astropy.table import Table
import numpy as np
from scipy.integrate import trapezoid
from scipy.special import ndtr
from scipy.stats import wasserstein_distance

from doob_lab.error import ConfigurationError, DomainError
from doob_lab.oracle import GaussianMixturePrior, HTransform, Interval, \
    Observation, true_posterior

logger = logging.getLogger(__name__)

DEFAULT_TAU = 0.1
MIN_QUADRATURE_POINTS = 1000
COVERAGE_TOLERANCE = 1e-4
METRICS = ('w1_mean', 'sliced_w1', 'mean_err', 'cov_err',
           'constraint_rmse', 'inlier_fraction')


def _samples(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise DomainError('empty sample set')
    return a


def wasserstein1_1d(a, b):
    """
    Wasserstein-1 distance between two one-dimensional sample sets, by
    the sorted coupling when sizes match and by the CDF integral
    otherwise.
    """

    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise DomainError('empty sample set')

    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))

    return float(wasserstein_distance(a, b))


def random_directions(rng, n_projections, dim):
    u = rng.standard_normal((n_projections, dim))
    return u / np.linalg.norm(u, axis=1)[:, None]


def sliced_w1(a, b, n_projections, rng, directions=None):
    """
    Mean one-dimensional W1 over random unit projections.  Explicit
    directions (one per row) may be given instead of drawing them.
    """

    a = _samples(a)
    b = _samples(b)
    if a.shape[1] != b.shape[1]:
        raise DomainError('sample dimensions differ: {0} and {1}'.format(
            a.shape[1], b.shape[1]))

    if directions is None:
        directions = random_directions(rng, n_projections, a.shape[1])

    pa = a.dot(directions.T)
    pb = b.dot(directions.T)
    return float(np.mean([wasserstein1_1d(pa[:, j], pb[:, j])
                          for j in range(directions.shape[0])]))


def constraint_residual(obs, samples, tau=DEFAULT_TAU):
    """
    Return (rmse, inlier fraction) of the constraint residual.

    For an Observation the residual is A x - y; for an Interval it is the
    distance from the interval.  The inlier fraction counts samples whose
    own RMS residual is below tau.
    """

    samples = _samples(samples)

    if isinstance(obs, Interval):
        resid = obs.distance(samples[:, 0])[:, None]
    else:
        resid = obs.residual(samples)

    per_sample = np.sqrt(np.mean(resid * resid, axis=1))
    return (float(np.sqrt(np.mean(resid * resid))),
            float(np.mean(per_sample < tau)))


class MetricReport(object):
    """
    Comparison of generated samples against reference samples.
    """

    def __init__(self, w1_per_dim, sliced_w1, mean_err, cov_err,
                 constraint_rmse=0.0, inlier_fraction=1.0, n_samples=0,
                 n_reference=0, n_aborted=0, seed=None):
        self.w1_per_dim = np.asarray(w1_per_dim)
        self.sliced_w1 = sliced_w1
        self.mean_err = mean_err
        self.cov_err = cov_err
        self.constraint_rmse = constraint_rmse
        self.inlier_fraction = inlier_fraction
        self.n_samples = n_samples
        self.n_reference = n_reference
        self.n_aborted = n_aborted
        self.seed = seed

    def __repr__(self):
        return 'MetricReport(sliced_w1={0:.4g}, n={1})'.format(
            self.sliced_w1, self.n_samples)

    def as_row(self):
        """
        Flat dictionary of the scalar metrics, with one w1_x<i> entry per
        coordinate.
        """

        row = {
            'w1_mean': float(np.mean(self.w1_per_dim)),
            'sliced_w1': self.sliced_w1,
            'mean_err': self.mean_err,
            'cov_err': self.cov_err,
            'constraint_rmse': self.constraint_rmse,
            'inlier_fraction': self.inlier_fraction,
            'n_samples': self.n_samples,
            'n_aborted': self.n_aborted,
        }
        for (i, w) in enumerate(self.w1_per_dim):
            row['w1_x{0}'.format(i)] = float(w)
        return row


def compare_samples(samples, reference, rng, obs=None, tau=DEFAULT_TAU,
                    n_projections=100, n_aborted=0, seed=None):
    """
    Build a MetricReport.  Rows containing NaN (aborted chains) are
    dropped and counted.
    """

    samples = _samples(samples)
    reference = _samples(reference)

    finite = np.all(np.isfinite(samples), axis=1)
    if not finite.all():
        n_aborted += int((~finite).sum())
        samples = samples[finite]
    if samples.shape[0] == 0:
        raise DomainError('every chain was aborted')

    w1 = [wasserstein1_1d(samples[:, i], reference[:, i])
          for i in range(samples.shape[1])]
    if samples.shape[1] == 1:
        sliced = w1[0]
    else:
        sliced = sliced_w1(samples, reference, n_projections, rng)

    mean_err = float(np.linalg.norm(samples.mean(axis=0)
                                    - reference.mean(axis=0)))
    cov_err = float(np.linalg.norm(
        np.atleast_2d(np.cov(samples, rowvar=False))
        - np.atleast_2d(np.cov(reference, rowvar=False))))

    (rmse, inliers) = (0.0, 1.0)
    if obs is not None:
        (rmse, inliers) = constraint_residual(obs, samples, tau)

    return MetricReport(w1, sliced, mean_err, cov_err, rmse, inliers,
                        n_samples=samples.shape[0],
                        n_reference=reference.shape[0],
                        n_aborted=n_aborted, seed=seed)


def reports_table(rows):
    """
    Collect a list of dictionaries (MetricReport rows plus labels) into
    an astropy Table with a stable column order.
    """

    names = list(rows[0].keys())
    return Table(rows=[[r[n] for n in names] for r in rows], names=names)


def summarise(table, group='strategy', metrics=METRICS):
    """
    Mean and standard error of each metric per group.
    """

    summary = Table(names=[group, 'n'] + [
        '{0}_{1}'.format(m, s) for m in metrics for s in ('mean', 'stderr')],
        dtype=['U32', int] + [float] * (2 * len(metrics)))

    for key in sorted(set(table[group])):
        rows = table[table[group] == key]
        n = len(rows)
        values = [key, n]
        for m in metrics:
            column = np.asarray(rows[m], dtype=np.float64)
            stderr = column.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
            values.extend([column.mean(), stderr])
        summary.add_row(values)

    return summary


class QuadraturePosterior(object):
    """
    One-dimensional posterior tabulated on a grid.
    """

    def __init__(self, grid, density, mean, variance, tail_mass):
        self.grid = grid
        self.density = density
        self.mean = mean
        self.variance = variance
        self.tail_mass = tail_mass
        self.coverage_ok = tail_mass < COVERAGE_TOLERANCE

    def __repr__(self):
        return 'QuadraturePosterior(mean={0:.6g}, variance={1:.6g})'.format(
            self.mean, self.variance)

    def to_table(self):
        return Table([self.grid, self.density], names=['x', 'density'])

    def sample(self, rng, n):
        """
        Inverse-CDF draws from the tabulated density.
        """

        cdf = np.concatenate(([0.0], np.cumsum(
            0.5 * (self.density[1:] + self.density[:-1])
            * np.diff(self.grid))))
        cdf /= cdf[-1]
        return np.interp(rng.random(n), cdf, self.grid)


def _mixture_mass(prior, lo, hi):
    if not lo < hi:
        return 0.0
    sd = np.sqrt(prior.covariances[:, 0, 0])
    mu = prior.means[:, 0]
    return float(np.sum(prior.weights
                        * (ndtr((hi - mu) / sd) - ndtr((lo - mu) / sd))))


def quadrature_posterior_1d(prior, event, grid):
    """
    Posterior of a one-dimensional prior given a soft observation or an
    interval event, by trapezoidal quadrature.

    Arguments:
    prior : one-dimensional GaussianMixturePrior
    event : Observation (soft) or Interval
    grid  : (lo, hi, n_points) with n_points >= 1000

    Interval events restrict the grid to the interval so that the
    integrand is smooth.  The probability mass the grid misses is bounded
    and reported as tail_mass; a warning is logged above 1e-4.
    """

    (lo, hi, n_points) = grid
    n_points = int(n_points)
    if prior.dim != 1:
        raise ConfigurationError('quadrature posterior needs a 1-D prior')
    if n_points < MIN_QUADRATURE_POINTS:
        raise ConfigurationError(
            'quadrature needs at least {0} points'.format(
                MIN_QUADRATURE_POINTS))

    if isinstance(event, Interval):
        a = max(lo, event.a)
        b = min(hi, event.b)
        if not a < b:
            raise ConfigurationError('grid does not meet the interval')
        x = np.linspace(a, b, n_points)
        unnormalised = np.exp(prior.log_density(x[:, None]))
        missing = (_mixture_mass(prior, event.a, min(event.b, lo))
                   + _mixture_mass(prior, max(event.a, hi), event.b))
        peak = 1.0

    elif isinstance(event, Observation):
        if event.is_hard:
            raise ConfigurationError(
                'a hard observation of a 1-D prior is a point mass')
        x = np.linspace(lo, hi, n_points)
        (loglik, _) = event.log_likelihood(x[:, None])
        unnormalised = np.exp(prior.log_density(x[:, None]) + loglik)
        missing = 1.0 - _mixture_mass(prior, lo, hi)
        # The likelihood never exceeds its value at A x = y.
        peak = 1.0 / (math.sqrt(2.0 * math.pi) * event.noise_std)

    else:
        raise ConfigurationError(
            'quadrature needs an interval or an observation')

    evidence = trapezoid(unnormalised, x)
    if not evidence > 0.0:
        raise ConfigurationError('posterior has no mass on the grid')

    density = unnormalised / evidence
    mean = trapezoid(x * density, x)
    variance = trapezoid((x - mean) ** 2 * density, x)
    tail_mass = missing * peak / evidence

    if tail_mass >= COVERAGE_TOLERANCE:
        logger.warning('quadrature grid [%g, %g] may miss %.3g of the '
                       'posterior mass', lo, hi, tail_mass)

    return QuadraturePosterior(x, density, float(mean), float(variance),
                               float(tail_mass))


class Benchmark(object):
    """
    A conditioning problem with an exact reference posterior.
    """

    def __init__(self, name, prior, event, description):
        self.name = name
        self.prior = prior
        self.event = event
        self.description = description

    def __repr__(self):
        return 'Benchmark({0!r})'.format(self.name)

    @property
    def dim(self):
        return self.prior.dim

    def h_transform(self, schedule):
        if isinstance(self.event, Interval):
            return HTransform('interval', self.prior, schedule,
                              interval=self.event)
        return HTransform.for_observation(self.prior, schedule, self.event)

    def reference(self, rng, n):
        """
        Exact posterior samples.
        """

        if isinstance(self.event, Interval):
            return self._rejection_sample(rng, n)
        return true_posterior(self.prior, self.event).sample(rng, n)

    def _rejection_sample(self, rng, n):
        chunks = []
        total = 0
        while total < n:
            draw = self.prior.sample(rng, 4 * (n - total) + 16)
            kept = draw[self.event.contains(draw[:, 0])]
            chunks.append(kept)
            total += kept.shape[0]
        return np.concatenate(chunks)[:n]


def _truncated_1d():
    return Benchmark(
        'truncated-1d', GaussianMixturePrior.gaussian([0.0], [[1.0]]),
        Interval(0.0, 1.0), 'N(0, 1) conditioned on the interval (0, 1)')


def _correlated_gaussian_2d():
    return Benchmark(
        'correlated-gaussian-2d',
        GaussianMixturePrior.gaussian([0.0, 0.0], [[1.0, 0.9], [0.9, 1.0]]),
        Observation([1.0], mask=[True, False]),
        'correlated 2-D Gaussian, first coordinate fixed at 1')


def _mixture_posterior_1d():
    return Benchmark(
        'mixture-posterior-1d',
        GaussianMixturePrior([0.5, 0.5], [[-1.5], [1.5]],
                             variances=[[0.25], [0.25]]),
        Observation([0.5], matrix=[[1.0]], noise_std=1.0),
        'two-component mixture under a noisy observation')


def _masked_gaussian_8d():
    index = np.arange(8)
    cov = 0.8 ** np.abs(index[:, None] - index[None, :])
    mask = np.isin(index, [0, 3, 6])
    return Benchmark(
        'masked-gaussian-8d', GaussianMixturePrior.gaussian(np.zeros(8), cov),
        Observation([1.0, -0.5, 0.5], mask=mask),
        'AR(1) Gaussian with three coordinates fixed')


BENCHMARKS = {
    'truncated-1d': _truncated_1d,
    'correlated-gaussian-2d': _correlated_gaussian_2d,
    'mixture-posterior-1d': _mixture_posterior_1d,
    'masked-gaussian-8d': _masked_gaussian_8d,
}


def get_benchmark(name):
    try:
        return BENCHMARKS[name]()
    except KeyError:
        raise ConfigurationError(
            'unknown benchmark "{0}"; available: {1}'.format(
                name, ', '.join(sorted(BENCHMARKS))))
