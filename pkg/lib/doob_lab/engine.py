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

from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor
import logging
import math
import os
import struct

import numpy as np

from doob_lab.error import ConfigurationError, DomainError
from doob_lab.util import atomic_path, read_csv, write_csv

logger = logging.getLogger(__name__)

BLOCK_SIZE = 256
SIGMA_RULES = ('sqrt_beta', 'beta')
TRAJECTORY_MAGIC = b'DLTRAJ01'
THREADS_VARIABLE = 'DOOB_LAB_THREADS'


class ScoreModel(object):
    """
    Noise-prediction interface used by the sampler.

    Subclasses implement eps(x, k) and, where reconstruction guidance is
    needed, eps_vjp(x, k, v) = v^T d eps / dx.  The step k is a single
    integer for sampling.
    """

    dim = None
    conditional = False
    condition_mode = 'none'
    per_coordinate_time = False

    def check_inputs(self, condition, coord_times):
        if condition is not None and not self.conditional:
            raise ConfigurationError(
                '{0!r} does not accept a condition'.format(self))
        if coord_times is not None and not self.per_coordinate_time:
            raise ConfigurationError(
                '{0!r} has no per-coordinate time input'.format(self))

    def eps(self, x, k, condition=None, coord_times=None):
        raise NotImplementedError()

    def eps_vjp(self, x, k, v, condition=None, coord_times=None):
        raise NotImplementedError()

    def score(self, schedule, x, k, condition=None, coord_times=None):
        eps = self.eps(x, k, condition=condition, coord_times=coord_times)
        return -eps / math.sqrt(1.0 - schedule.alpha_bar(k))


class SamplerConfig(namedtuple(
        'SamplerConfig',
        ['n_chains', 'seed', 'store_trajectory', 'sigma_rule'])):
    """
    Settings of one sampling run.

    Arguments:
    n_chains         : number of independent chains (>= 1)
    seed             : 64-bit run seed
    store_trajectory : keep every intermediate state
    sigma_rule       : 'sqrt_beta' (variance matched, default) or 'beta'
    """

    __slots__ = ()

    def __new__(cls, n_chains, seed, store_trajectory=False,
                sigma_rule='sqrt_beta'):
        n_chains = int(n_chains)
        if n_chains < 1:
            raise ConfigurationError('n_chains must be at least 1')
        if seed is None:
            raise ConfigurationError('a sampling seed is required')
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigurationError('seed must be an unsigned 64-bit value')
        if sigma_rule not in SIGMA_RULES:
            raise ConfigurationError(
                'unknown sigma rule "{0}"'.format(sigma_rule))

        return super(SamplerConfig, cls).__new__(
            cls, n_chains, seed, bool(store_trajectory), sigma_rule)


def sampler_config_from_config(entries, seed):
    try:
        return SamplerConfig(
            int(entries.get('n_chains', 1000)), seed,
            store_trajectory=entries.get(
                'store_trajectory', 'false').lower() in ('1', 'true', 'yes'),
            sigma_rule=entries.get('sigma_rule', 'sqrt_beta'))

    except ValueError as e:
        raise ConfigurationError(
            'invalid sampler configuration: {0}'.format(e))


class SampleBatch(object):
    """
    Result of a sampling run.

    final has one row per chain.  trajectories, when stored, is indexed
    [chain, k, coordinate] so that trajectories[:, 0] == final.  seeds
    holds the random substream (block) id of each chain and aborted flags
    chains stopped by a non-finite state; their rows are NaN.
    """

    def __init__(self, final, trajectories=None, seeds=None, aborted=None):
        self.final = final
        self.trajectories = trajectories
        self.seeds = seeds
        if aborted is None:
            aborted = np.zeros(final.shape[0], dtype=bool)
        self.aborted = aborted

    def __repr__(self):
        return 'SampleBatch(n_chains={0}, d={1}, aborted={2})'.format(
            self.final.shape[0], self.final.shape[1], self.n_aborted)

    @property
    def n_chains(self):
        return self.final.shape[0]

    @property
    def n_aborted(self):
        return int(self.aborted.sum())

    def valid(self):
        """
        Terminal samples of the chains that completed.
        """

        return self.final[~self.aborted]


def forward_noise(schedule, k, x0, rng, eps=None):
    """
    Draw x_k = sqrt(ab_k) x0 + sqrt(1 - ab_k) eps.

    k may be an integer or one step per row of x0.  Returns (x_k, eps).
    """

    x0 = np.asarray(x0, dtype=np.float64)
    ab = np.asarray(schedule.alpha_bar(k), dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))

    if eps is None:
        eps = rng.standard_normal(x0.shape)

    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps, eps)


def reverse_step(schedule, k, x_k, eps_hat, rng, cfg):
    """
    One ancestral step
    x_{k-1} = (x_k - beta_k eps_hat / sqrt(1 - ab_k)) / sqrt(1 - beta_k)
              + sigma_k z,
    with no noise on the final step k = 1.
    """

    if not 1 <= k <= schedule.n_steps:
        raise DomainError('reverse step index {0} outside 1..{1}'.format(
            k, schedule.n_steps))

    beta = schedule.beta(k)
    ab = schedule.alpha_bar(k)
    mean = ((x_k - beta / math.sqrt(1.0 - ab) * eps_hat)
            / math.sqrt(1.0 - beta))

    if k == 1:
        return mean

    sigma = math.sqrt(beta) if cfg.sigma_rule == 'sqrt_beta' else beta
    return mean + sigma * rng.standard_normal(np.shape(x_k))


def thread_count():
    """
    Number of sampling threads from DOOB_LAB_THREADS (default 1).
    """

    value = os.environ.get(THREADS_VARIABLE)
    if not value:
        return 1

    try:
        count = int(value)
    except ValueError:
        count = 0
    if count < 1:
        raise ConfigurationError(
            '{0} must be a positive integer, not "{1}"'.format(
                THREADS_VARIABLE, value))

    return count


def block_rngs(seed, n_blocks):
    """
    Independent counter-based generators for each chain block.
    """

    children = np.random.SeedSequence(seed).spawn(n_blocks)
    return [np.random.Generator(np.random.Philox(c)) for c in children]


def _plain_step(model, schedule, k, x, rng, cfg):
    eps = model.eps(x, k)
    return reverse_step(schedule, k, x, eps, rng, cfg)


def _run_block(score_model, schedule, strategy, n, rng, cfg):
    n_steps = schedule.n_steps
    x = rng.standard_normal((n, score_model.dim))
    aborted = np.zeros(n, dtype=bool)

    trajectories = None
    if cfg.store_trajectory:
        trajectories = np.empty((n, n_steps + 1, score_model.dim))
        trajectories[:, n_steps] = x

    if strategy is None:
        step = _plain_step
    else:
        x = strategy.start(schedule, x, rng)
        step = strategy.step

    for k in range(n_steps, 0, -1):
        with np.errstate(invalid='ignore', over='ignore', divide='ignore'):
            x = step(score_model, schedule, k, x, rng, cfg)

        bad = ~np.all(np.isfinite(x), axis=1) & ~aborted
        if bad.any():
            logger.warning('aborting %d chain(s) with non-finite state '
                           'at step %d', bad.sum(), k)
            aborted |= bad
        # Aborted chains are held at zero while the run lasts and are
        # reported as NaN in the trajectory and the final samples.
        x[aborted] = 0.0

        if trajectories is not None:
            trajectories[:, k - 1] = x
            trajectories[aborted, k - 1] = np.nan

    if strategy is not None:
        x = strategy.finish(schedule, x)
        if trajectories is not None:
            trajectories[:, 0] = x

    x[aborted] = np.nan
    if trajectories is not None:
        trajectories[aborted, 0] = np.nan

    return (x, trajectories, aborted)


def sample(score_model, schedule, strategy, cfg):
    """
    Run cfg.n_chains reverse chains from x_N ~ N(0, I).

    Chains are processed in blocks of BLOCK_SIZE, each with its own random
    substream, so the output depends only on the seed and not on the
    number of threads.  strategy may be None for unconditional sampling.

    Returns a SampleBatch.
    """

    if strategy is not None:
        strategy.check(score_model)

    n_blocks = int(math.ceil(cfg.n_chains / float(BLOCK_SIZE)))
    sizes = [min(BLOCK_SIZE, cfg.n_chains - b * BLOCK_SIZE)
             for b in range(n_blocks)]
    rngs = block_rngs(cfg.seed, n_blocks)
    threads = min(thread_count(), n_blocks)

    logger.info('sampling %d chain(s) over %d steps with %s (%d thread(s))',
                cfg.n_chains, schedule.n_steps,
                'no conditioning' if strategy is None else repr(strategy),
                threads)

    def run(b):
        return _run_block(score_model, schedule, strategy, sizes[b], rngs[b],
                          cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(n_blocks)))
    else:
        results = [run(b) for b in range(n_blocks)]

    final = np.concatenate([r[0] for r in results])
    aborted = np.concatenate([r[2] for r in results])
    seeds = np.repeat(np.arange(n_blocks), sizes)
    trajectories = None
    if cfg.store_trajectory:
        trajectories = np.concatenate([r[1] for r in results])

    if aborted.any():
        logger.warning('%d of %d chain(s) aborted', aborted.sum(),
                       cfg.n_chains)
    logger.info('sampling finished')

    return SampleBatch(final, trajectories, seeds, aborted)


def coordinate_names(dim):
    return ['x{0}'.format(i) for i in range(dim)]


def write_samples(pathname, batch):
    """
    Write terminal samples as CSV, one row per chain with columns
    x0..x{d-1}.
    """

    write_csv(pathname, batch.final.T, coordinate_names(batch.final.shape[1]))


def read_samples(pathname):
    """
    Read a samples CSV back into an n x d array.
    """

    table = read_csv(pathname)
    names = [n for n in table.colnames if n.startswith('x')]
    if not names:
        raise ConfigurationError(
            'no coordinate columns in {0}'.format(pathname))

    return np.column_stack(
        [np.asarray(table[n], dtype=np.float64) for n in names])


def write_trajectories(pathname, trajectories):
    """
    Write a trajectory tensor: magic, then n_chains, N+1 and d as
    little-endian unsigned 64-bit integers, then the values as
    little-endian doubles in [chain, step, coordinate] order.
    """

    trajectories = np.ascontiguousarray(trajectories, dtype='<f8')
    if trajectories.ndim != 3:
        raise DomainError('trajectories must be a 3-D array')

    with atomic_path(pathname) as tmpname:
        with open(tmpname, 'wb') as f:
            f.write(TRAJECTORY_MAGIC)
            f.write(struct.pack('<3Q', *trajectories.shape))
            f.write(trajectories.tobytes())


def read_trajectories(pathname):
    with open(pathname, 'rb') as f:
        magic = f.read(len(TRAJECTORY_MAGIC))
        if magic != TRAJECTORY_MAGIC:
            raise ConfigurationError(
                '{0} is not a trajectory file'.format(pathname))
        shape = struct.unpack('<3Q', f.read(24))
        data = np.frombuffer(f.read(), dtype='<f8')

    if data.size != shape[0] * shape[1] * shape[2]:
        raise ConfigurationError(
            'truncated trajectory file {0}'.format(pathname))

    return data.reshape(shape).astype(np.float64)
