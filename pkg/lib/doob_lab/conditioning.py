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

from doob_lab.engine import reverse_step
from doob_lab.error import ConfigurationError, NumericalError
from doob_lab.nets import ConditioningInput
from doob_lab.oracle import HTransform, Observation, tweedie_vjp, \
    TWEEDIE_MIN_ALPHA_BAR

logger = logging.getLogger(__name__)

GUIDANCE_KINDS = ('constant', 'alpha', 'variance')
RENOISE_INDICES = ('previous', 'current')


class GuidanceSchedule(object):
    """
    Step size gamma_k of reconstruction guidance.

    constant : gamma_k = gamma
    alpha    : gamma_k = gamma * ab_k (1 - ab_k)
    variance : gamma_k = beta_k / (2 ((1 - ab_k) + noise_std^2)), the step
               at which one guidance update equals the exact h drift for a
               unit-variance Gaussian prior
    """

    def __init__(self, kind='constant', gamma=1.0, noise_std=0.0):
        if kind not in GUIDANCE_KINDS:
            raise ConfigurationError(
                'unknown guidance kind "{0}"'.format(kind))
        if gamma < 0.0 or noise_std < 0.0:
            raise ConfigurationError(
                'guidance gamma and noise_std must be >= 0')
        self.kind = kind
        self.gamma = float(gamma)
        self.noise_std = float(noise_std)

    def __repr__(self):
        return 'GuidanceSchedule({0!r}, gamma={1!r})'.format(
            self.kind, self.gamma)

    def __call__(self, schedule, k):
        ab = schedule.alpha_bar(k)
        if self.kind == 'constant':
            return self.gamma
        elif self.kind == 'alpha':
            return self.gamma * ab * (1.0 - ab)
        return schedule.beta(k) / (2.0 * ((1.0 - ab) + self.noise_std ** 2))


def _check_hard_mask(obs, what):
    if not isinstance(obs, Observation) or obs.kind != 'mask' \
            or not obs.is_hard:
        raise ConfigurationError(
            '{0} needs a hard mask observation'.format(what))


def _check_unconditional(model, what):
    if model.conditional:
        raise ConfigurationError(
            '{0} runs on an unconditional score model, not {1!r}'.format(
                what, model))


def exact_h_step(h, schedule, k, x_k, base_eps_hat):
    """
    Fold the h-transform drift into the noise prediction:
    eps' = eps - sqrt(1 - ab_k) grad ln h(k, x_k).
    """

    value = h.value_and_grad(k, x_k, schedule=schedule)
    if value.underflow.any():
        logger.debug('h underflow in %d chain(s) at step %d',
                     value.underflow.sum(), k)
    scale = math.sqrt(1.0 - schedule.alpha_bar(k))
    return base_eps_hat - scale * value.grad_log


def recon_guidance_step(obs, gsched, score_model, schedule, k, x_k,
                        eps_hat=None, stop_gradient=False):
    """
    One gradient step on |y - A x0_hat|^2 with respect to x_k, where
    x0_hat is the Tweedie estimate.  eps_hat may be supplied when the
    caller already evaluated the model at x_k.
    """

    gamma = gsched(schedule, k)
    if gamma == 0.0:
        return x_k

    ab = schedule.alpha_bar(k)
    if ab < TWEEDIE_MIN_ALPHA_BAR:
        raise NumericalError(
            'alpha_bar_{0} = {1:g} is too small for guidance'.format(k, ab))

    if eps_hat is None:
        eps_hat = score_model.eps(x_k, k)
    x0_hat = (x_k - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)

    grad_x0 = -2.0 * (obs.y - obs.apply(x0_hat)).dot(obs.matrix)
    grad = tweedie_vjp(score_model, schedule, k, x_k, grad_x0,
                       stop_gradient=stop_gradient)

    return x_k - gamma * grad


def replacement_step(obs, schedule, k, x_km1, rng):
    """
    Overwrite the observed coordinates of x_{k-1} with the forward-noised
    observation sqrt(ab_{k-1}) y + sqrt(1 - ab_{k-1}) eta; at k = 1 they
    are set to y exactly.
    """

    x = np.array(x_km1, dtype=np.float64)
    if k == 1:
        x[:, obs.mask] = obs.y
        return x

    ab = schedule.alpha_bar(k - 1)
    eta = rng.standard_normal((x.shape[0], obs.n_observed))
    x[:, obs.mask] = math.sqrt(ab) * obs.y + math.sqrt(1.0 - ab) * eta
    return x


def repaint_step(obs, R, schedule, k, x, rng, inner_sampler,
                 renoise='previous'):
    """
    R rounds of denoise, replace and re-noise at outer step k.

    inner_sampler(x) performs one reverse step from k to k-1.  Re-noising
    x_k = sqrt(1 - beta) x_{k-1} + sqrt(beta) zeta uses beta_{k-1}
    ('previous') or beta_k ('current') and is skipped after the last round
    and at k = 1.
    """

    if k > 1:
        beta = schedule.beta(k - 1 if renoise == 'previous' else k)

    for r in range(1, R + 1):
        x_prev = replacement_step(obs, schedule, k, inner_sampler(x), rng)
        if r == R or k == 1:
            return x_prev
        x = (math.sqrt(1.0 - beta) * x_prev
             + math.sqrt(beta) * rng.standard_normal(x_prev.shape))


def rfdiff_sample_step(obs, k, x_k):
    """
    Set the motif coordinates to the clean observation and build the
    per-coordinate time vector (0 on the motif, k elsewhere).
    """

    x = np.array(x_k, dtype=np.float64)
    x[:, obs.mask] = obs.y
    times = np.where(obs.mask, 0, k)
    return (x, np.broadcast_to(times, x.shape))


class ConditioningStrategy(object):
    """
    Base class of the per-step sampling hooks.

    step() evaluates the model after pre_score, adjusts the prediction in
    post_score, takes the reverse step and then applies post_noise.  The
    reverse-step noise is drawn before any noise used by post_noise.
    """

    name = 'null'

    def __repr__(self):
        return '{0}()'.format(self.__class__.__name__)

    def check(self, model):
        pass

    def start(self, schedule, x, rng):
        return x

    def pre_score(self, model, schedule, k, x):
        return (x, None, None)

    def post_score(self, model, schedule, k, x, eps):
        return eps

    def post_noise(self, schedule, k, x_prev, rng):
        return x_prev

    def finish(self, schedule, x):
        return x

    def step(self, model, schedule, k, x, rng, cfg):
        (x, condition, coord_times) = self.pre_score(model, schedule, k, x)
        eps = model.eps(x, k, condition=condition, coord_times=coord_times)
        eps = self.post_score(model, schedule, k, x, eps)
        x_prev = reverse_step(schedule, k, x, eps, rng, cfg)
        return self.post_noise(schedule, k, x_prev, rng)


class NullStrategy(ConditioningStrategy):
    pass


class ExactH(ConditioningStrategy):
    """
    Sampling with the exact h-transform drift of an analytic oracle.
    """

    name = 'exact_h'

    def __init__(self, h):
        if not isinstance(h, HTransform):
            raise ConfigurationError('exact h sampling needs an HTransform')
        self.h = h

    def __repr__(self):
        return 'ExactH({0!r})'.format(self.h)

    def check(self, model):
        _check_unconditional(model, 'exact h sampling')
        if model.dim != self.h.prior.dim:
            raise ConfigurationError('h-transform dimension mismatch')

    def post_score(self, model, schedule, k, x, eps):
        return exact_h_step(self.h, schedule, k, x, eps)


class ReconGuidance(ConditioningStrategy):
    """
    Reconstruction guidance: a gradient step on the Tweedie reconstruction
    error before each reverse step, reusing the prediction at the
    unguided state.
    """

    name = 'recon_guidance'

    def __init__(self, obs, gsched, stop_gradient=False):
        if not isinstance(obs, Observation):
            raise ConfigurationError(
                'reconstruction guidance needs an observation')
        self.obs = obs
        self.gsched = gsched
        self.stop_gradient = stop_gradient

    def __repr__(self):
        return 'ReconGuidance({0!r})'.format(self.gsched)

    def check(self, model):
        _check_unconditional(model, 'reconstruction guidance')
        if model.dim != self.obs.dim:
            raise ConfigurationError('observation dimension mismatch')

    def step(self, model, schedule, k, x, rng, cfg):
        eps = model.eps(x, k)
        x = recon_guidance_step(self.obs, self.gsched, model, schedule, k, x,
                                eps_hat=eps, stop_gradient=self.stop_gradient)
        return reverse_step(schedule, k, x, eps, rng, cfg)


class Replacement(ConditioningStrategy):
    name = 'replacement'

    def __init__(self, obs):
        _check_hard_mask(obs, 'replacement')
        self.obs = obs

    def check(self, model):
        _check_unconditional(model, 'replacement')

    def post_noise(self, schedule, k, x_prev, rng):
        return replacement_step(self.obs, schedule, k, x_prev, rng)


class Repaint(ConditioningStrategy):
    name = 'repaint'

    def __init__(self, obs, R, renoise='previous'):
        _check_hard_mask(obs, 'repaint')
        if int(R) < 1:
            raise ConfigurationError('repaint needs R >= 1')
        if renoise not in RENOISE_INDICES:
            raise ConfigurationError(
                'unknown repaint re-noise index "{0}"'.format(renoise))
        self.obs = obs
        self.R = int(R)
        self.renoise = renoise

    def __repr__(self):
        return 'Repaint(R={0})'.format(self.R)

    def check(self, model):
        _check_unconditional(model, 'repaint')

    def step(self, model, schedule, k, x, rng, cfg):
        def inner(x):
            return reverse_step(schedule, k, x, model.eps(x, k), rng, cfg)

        return repaint_step(self.obs, self.R, schedule, k, x, rng, inner,
                            renoise=self.renoise)


class RFDiffSample(ConditioningStrategy):
    """
    Motif sampling for networks trained with clean motif coordinates at
    time 0.
    """

    name = 'rfdiff'

    def __init__(self, obs):
        _check_hard_mask(obs, 'motif sampling')
        self.obs = obs

    def check(self, model):
        if not model.per_coordinate_time:
            raise ConfigurationError(
                'motif sampling needs a network with per-coordinate time '
                'input, not {0!r}'.format(model))

    def pre_score(self, model, schedule, k, x):
        (x, times) = rfdiff_sample_step(self.obs, k, x)
        return (x, None, times)

    def finish(self, schedule, x):
        x = np.array(x)
        x[:, self.obs.mask] = self.obs.y
        return x


class Amortised(ConditioningStrategy):
    """
    Pass the observation to a mask-conditioned network.
    """

    name = 'amortised'

    def __init__(self, obs):
        _check_hard_mask(obs, 'amortised sampling')
        values = np.zeros(obs.dim)
        values[obs.mask] = obs.y
        self.obs = obs
        self.condition = ConditioningInput.masked(values, obs.mask)

    def check(self, model):
        if model.condition_mode != 'mask' or model.dim != self.obs.dim:
            raise ConfigurationError(
                'amortised sampling needs a mask-conditioned network of '
                'dimension {0}, not {1!r}'.format(self.obs.dim, model))

    def pre_score(self, model, schedule, k, x):
        return (x, self.condition, None)


class ClassifierFree(ConditioningStrategy):
    """
    Sampling from an auxiliary-variable network with guidance weight w:
    eps = (1 + w) eps(x, k, y) - w eps(x, k, empty).
    """

    name = 'classifier_free'

    def __init__(self, y, weight=0.0):
        self.condition = ConditioningInput.aux(y)
        self.weight = float(weight)

    def __repr__(self):
        return 'ClassifierFree(weight={0!r})'.format(self.weight)

    def check(self, model):
        if model.condition_mode != 'aux' or \
                model.aux_dim != self.condition.values.shape[1]:
            raise ConfigurationError(
                'classifier-free sampling needs an aux-conditioned network '
                'matching the condition, not {0!r}'.format(model))

    def step(self, model, schedule, k, x, rng, cfg):
        eps = model.eps(x, k, condition=self.condition)
        if self.weight:
            eps = ((1.0 + self.weight) * eps
                   - self.weight * model.eps(x, k))
        return reverse_step(schedule, k, x, eps, rng, cfg)


class FinetunedH(ConditioningStrategy):
    """
    Add the prediction of a finetuned h (or control) network to a frozen
    unconditional model.
    """

    name = 'finetuned_h'

    def __init__(self, h_net, condition=None):
        self.h_net = h_net
        self.condition = condition

    @classmethod
    def for_observation(cls, h_net, obs):
        """
        Offline-finetuned networks take the observation as a masked
        condition.
        """

        if h_net.condition_mode != 'mask':
            return cls(h_net)
        _check_hard_mask(obs, 'a mask-conditioned h network')
        return cls(h_net, Amortised(obs).condition)

    def __repr__(self):
        return 'FinetunedH({0!r})'.format(self.h_net)

    def check(self, model):
        _check_unconditional(model, 'finetuned h sampling')
        if model.dim != self.h_net.dim:
            raise ConfigurationError('h network dimension mismatch')

    def post_score(self, model, schedule, k, x, eps):
        return eps + self.h_net.eps(x, k, condition=self.condition)


STRATEGIES = dict((cls.name, cls) for cls in (
    NullStrategy, ExactH, ReconGuidance, Replacement, Repaint, RFDiffSample,
    Amortised, ClassifierFree, FinetunedH))
