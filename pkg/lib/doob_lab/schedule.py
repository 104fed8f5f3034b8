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

import numpy as np

from doob_lab import __version__
from doob_lab.error import ConfigurationError, DomainError

__doc__ = """
Noise-schedule arithmetic for the variance-preserving (OU) forward process.

A schedule holds the discrete per-step variances beta_k for k = 1..N and
their cumulative products alpha_bar_k = prod_{j<=k} (1 - beta_j), with the
convention alpha_bar_0 = 1.  Discrete step k corresponds to continuous time
t = k / N, so that the continuous rate beta(t) = -d/dt ln alpha_bar(t)
integrates to -ln alpha_bar_N over [0, 1].

Version: """ + __version__.version

logger = logging.getLogger(__name__)

COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999

KINDS = ('linear', 'cosine', 'custom')


class NoiseSchedule(object):
    """
    Immutable table of per-step variances and their cumulative products.

    Steps are indexed 1..N as in the sampling algorithms; index 0 of
    alpha_bar is the noiseless time zero.
    """

    def __init__(self, betas, kind='custom', beta_1=None, beta_N=None):
        """
        Arguments:
        betas  : sequence of N per-step variances, each in (0, 1)
        kind   : one of 'linear', 'cosine', 'custom'
        beta_1 : first variance (linear schedules, for the config echo)
        beta_N : last variance (linear schedules, for the config echo)
        """

        betas = np.array(betas, dtype=np.float64).ravel()

        if kind not in KINDS:
            raise ConfigurationError(
                'unknown schedule kind "{0}"'.format(kind))
        if betas.size < 1:
            raise ConfigurationError('a schedule needs at least one step')
        if not (np.all(betas > 0.0) and np.all(betas < 1.0)):
            raise ConfigurationError('schedule variances must lie in (0, 1)')

        alpha_bars = np.empty(betas.size + 1)
        alpha_bars[0] = 1.0
        alpha_bars[1:] = np.cumprod(1.0 - betas)

        betas.setflags(write=False)
        alpha_bars.setflags(write=False)

        self.kind = kind
        self.beta_1 = float(betas[0]) if beta_1 is None else float(beta_1)
        self.beta_N = float(betas[-1]) if beta_N is None else float(beta_N)
        self._betas = betas
        self._alpha_bars = alpha_bars

    def __repr__(self):
        return 'NoiseSchedule(kind={0!r}, n_steps={1})'.format(
            self.kind, self.n_steps)

    @property
    def n_steps(self):
        return self._betas.size

    @property
    def betas(self):
        """Per-step variances beta_1..beta_N (length N)."""
        return self._betas

    @property
    def alpha_bars(self):
        """Cumulative products alpha_bar_1..alpha_bar_N (length N)."""
        return self._alpha_bars[1:]

    @property
    def alpha_bars_with_origin(self):
        """Cumulative products alpha_bar_0..alpha_bar_N (length N + 1)."""
        return self._alpha_bars

    def beta(self, k):
        """
        Return beta_k for a step (or array of steps) in 1..N.
        """

        k = self._check_step(k, lowest=1)
        return self._betas[k - 1]

    def alpha_bar(self, k):
        """
        Return alpha_bar_k for a step (or array of steps) in 0..N.
        """

        k = self._check_step(k, lowest=0)
        return self._alpha_bars[k]

    def transition(self, k_from, k_to):
        """
        Return (scale, variance) of the forward kernel from step k_from to
        a later step k_to:  x_to ~ N(scale * x_from, variance).
        """

        if k_to < k_from:
            raise DomainError('forward kernel needs k_to >= k_from')

        ratio = self.alpha_bar(k_to) / self.alpha_bar(k_from)
        return (math.sqrt(ratio), 1.0 - ratio)

    def to_config(self):
        """
        Return the flat configuration entries describing this schedule.
        """

        entries = {'kind': self.kind, 'n_steps': str(self.n_steps)}
        if self.kind == 'linear':
            entries['beta_1'] = repr(self.beta_1)
            entries['beta_N'] = repr(self.beta_N)
        elif self.kind == 'custom':
            entries['betas'] = ', '.join(repr(float(b)) for b in self._betas)
        return entries

    def _check_step(self, k, lowest):
        k_arr = np.asarray(k)
        if not np.issubdtype(k_arr.dtype, np.integer):
            raise DomainError('step index must be an integer')
        if np.any(k_arr < lowest) or np.any(k_arr > self.n_steps):
            raise DomainError('step index {0} outside {1}..{2}'.format(
                k, lowest, self.n_steps))
        return k_arr if k_arr.ndim else int(k_arr)


def make_linear_schedule(n_steps, beta_1, beta_N):
    """
    Construct a schedule whose variances are linearly spaced between
    beta_1 and beta_N inclusive.
    """

    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError('n_steps must be a positive integer')
    if not (0.0 < beta_1 <= beta_N < 1.0):
        raise ConfigurationError(
            'linear schedule needs 0 < beta_1 <= beta_N < 1, '
            'got {0!r}, {1!r}'.format(beta_1, beta_N))

    betas = np.linspace(beta_1, beta_N, int(n_steps))
    logger.debug('linear schedule: N=%d beta in [%g, %g]',
                 n_steps, beta_1, beta_N)

    return NoiseSchedule(betas, kind='linear', beta_1=beta_1, beta_N=beta_N)


def make_cosine_schedule(n_steps):
    """
    Construct a schedule whose alpha_bar follows the squared-cosine
    profile cos^2(((k/N) + s) / (1 + s) * pi / 2), normalised to 1 at k = 0.

    The variances are derived from consecutive ratios and clipped to 0.999,
    after which alpha_bar is recomputed from the clipped variances so that
    the cumulative-product identity holds exactly.
    """

    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigurationError('n_steps must be a positive integer')

    profile = cosine_profile(np.arange(int(n_steps) + 1) / float(n_steps))
    betas = 1.0 - profile[1:] / profile[:-1]
    betas = np.clip(betas, np.finfo(np.float64).tiny, COSINE_MAX_BETA)
    logger.debug('cosine schedule: N=%d', n_steps)

    return NoiseSchedule(betas, kind='cosine')


def cosine_profile(t):
    """
    Evaluate the normalised squared-cosine alpha_bar profile at
    continuous times t in [0, 1].
    """

    def f(u):
        return np.cos((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)
                      * np.pi / 2.0) ** 2

    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def schedule_from_config(entries):
    """
    Build a schedule from flat configuration entries (a mapping with keys
    kind, n_steps and, for linear schedules, beta_1 and beta_N).
    """

    kind = entries.get('kind', 'linear')

    try:
        n_steps = int(entries.get('n_steps', 1000))
        if kind == 'linear':
            return make_linear_schedule(
                n_steps,
                float(entries.get('beta_1', 1e-4)),
                float(entries.get('beta_N', 2e-2)))
        elif kind == 'cosine':
            return make_cosine_schedule(n_steps)
        elif kind == 'custom':
            betas = [float(b) for b in entries['betas'].split(',')]
            return NoiseSchedule(betas, kind='custom')

    except (KeyError, ValueError) as e:
        raise ConfigurationError(
            'invalid schedule configuration: {0}'.format(e))

    raise ConfigurationError('unknown schedule kind "{0}"'.format(kind))


def continuous_beta(schedule, t):
    """
    Continuous-time rate beta(t) = -d/dt ln alpha_bar(t).

    Each discrete interval ((k-1)/N, k/N) carries the rate
    -N ln(1 - beta_k); these values are placed at the interval midpoints
    and interpolated linearly, held constant beyond the outermost
    midpoints.

    Arguments:
    schedule : NoiseSchedule
    t        : time (scalar or array) in [0, 1]
    """

    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise DomainError('continuous time must lie in [0, 1]')

    n = schedule.n_steps
    rates = -n * np.log1p(-schedule.betas)
    midpoints = (np.arange(n) + 0.5) / n

    value = np.interp(t_arr, midpoints, rates)
    return value if value.ndim else float(value)


def continuous_alpha_bar(schedule, t):
    """
    Continuous alpha_bar(t), interpolating ln alpha_bar linearly between
    the grid times t = k / N.
    """

    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
        raise DomainError('continuous time must lie in [0, 1]')

    n = schedule.n_steps
    grid = np.arange(n + 1) / float(n)
    value = np.exp(np.interp(t_arr, grid,
                             np.log(schedule.alpha_bars_with_origin)))
    return value if value.ndim else float(value)


def ou_drift(schedule, t, x):
    """
    Drift of the forward OU process, -beta(t) x / 2.
    """

    return -0.5 * continuous_beta(schedule, t) * np.asarray(x)


def ou_diffusion(schedule, t):
    """
    Diffusion coefficient of the forward OU process, sqrt(beta(t)).
    """

    return np.sqrt(continuous_beta(schedule, t))
