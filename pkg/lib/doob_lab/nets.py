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
import json
import logging
import math
import struct

import numpy as np
from scipy.special import expit

from doob_lab.engine import ScoreModel, block_rngs, forward_noise
from doob_lab.error import ConfigurationError, DivergenceError
from doob_lab.util import atomic_path

logger = logging.getLogger(__name__)

N_FREQUENCIES = 8
FREQUENCIES = np.pi * 2.0 ** np.arange(N_FREQUENCIES) / 8.0
PAD_VALUE = -2.0
CONDITION_MODES = ('none', 'mask', 'aux')
OPTIMISERS = ('adam', 'sgd')
CONTROL_WEIGHTS = ('simple', 'exact')

CHECKPOINT_MAGIC = b'DLNET001'
CHECKPOINT_FORMAT = 1


def silu(z):
    return z * expit(z)


def silu_grad(z):
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


def time_embedding(t):
    """
    Sinusoidal features of the normalised time t = k / N, one row per t.
    """

    angles = np.outer(np.ravel(t), FREQUENCIES)
    return np.hstack((np.sin(angles), np.cos(angles)))


class ConditioningInput(object):
    """
    Condition passed to a conditional network.

    In 'mask' mode the condition is a partially observed data point,
    encoded as mask * x0 with PAD_VALUE off the mask, followed by the mask
    itself.  In 'aux' mode it is an auxiliary vector y followed by a
    presence flag.  Rows with an empty mask, or without the presence
    flag, are the dropped (unconditional) condition.
    """

    def __init__(self, mode, values, flags, pad_value=PAD_VALUE):
        if mode not in ('mask', 'aux'):
            raise ConfigurationError(
                'unknown conditioning mode "{0}"'.format(mode))
        self.mode = mode
        self.values = np.atleast_2d(np.asarray(values, dtype=np.float64))
        self.flags = np.atleast_2d(np.asarray(flags))
        self.pad_value = pad_value

    @classmethod
    def masked(cls, values, mask, pad_value=PAD_VALUE):
        """
        Arguments:
        values : full-length data vectors (only masked entries are used)
        mask   : boolean array of the same shape, True where observed
        """

        return cls('mask', values, np.asarray(mask, dtype=bool), pad_value)

    @classmethod
    def aux(cls, y, present=True):
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        present = np.asarray(present, dtype=bool).reshape(-1, 1)
        return cls('aux', y, present)

    def __repr__(self):
        return 'ConditioningInput(mode={0!r})'.format(self.mode)

    def channels(self, n):
        """
        Encoded condition channels broadcast to n rows.
        """

        if self.mode == 'mask':
            mask = np.broadcast_to(self.flags, (n, self.flags.shape[1]))
            values = np.broadcast_to(self.values, mask.shape)
            return np.hstack((np.where(mask, values, self.pad_value),
                              mask.astype(np.float64)))

        present = np.broadcast_to(self.flags, (n, 1)).astype(np.float64)
        values = np.broadcast_to(self.values, (n, self.values.shape[1]))
        return np.hstack((values * present, present))


class EpsNet(ScoreModel):
    """
    Multilayer perceptron noise predictor with SiLU activations.

    The input row is x, then the time embedding of k/N, then the condition
    channels (if any), then the per-coordinate times t_i/N (if enabled).
    Parameters are kept in one flat vector; weight matrices and biases are
    views into it.
    """

    def __init__(self, dim, n_steps, hidden=(128, 128), condition_mode='none',
                 aux_dim=0, per_coordinate_time=False, rng=None, params=None):
        if condition_mode not in CONDITION_MODES:
            raise ConfigurationError(
                'unknown condition mode "{0}"'.format(condition_mode))
        if condition_mode == 'aux' and aux_dim < 1:
            raise ConfigurationError('aux conditioning needs aux_dim >= 1')

        self.dim = int(dim)
        self.n_steps = int(n_steps)
        self.hidden = tuple(int(h) for h in hidden)
        self.condition_mode = condition_mode
        self.conditional = condition_mode != 'none'
        self.aux_dim = int(aux_dim) if condition_mode == 'aux' else 0
        self.per_coordinate_time = bool(per_coordinate_time)

        self.widths = ((self.input_width,) + self.hidden + (self.dim,))
        self.shapes = [(self.widths[i], self.widths[i + 1])
                       for i in range(len(self.widths) - 1)]
        n_params = sum(a * b + b for (a, b) in self.shapes)

        if params is None:
            if rng is None:
                raise ConfigurationError(
                    'a new network needs a random generator')
            params = self._initial_params(rng, n_params)
        else:
            params = np.array(params, dtype=np.float64)
            if params.size != n_params:
                raise ConfigurationError(
                    'expected {0} parameters, got {1}'.format(
                        n_params, params.size))

        self.params = params
        self._bind_layers()

    def __repr__(self):
        return 'EpsNet(widths={0}, condition={1!r})'.format(
            self.widths, self.condition_mode)

    @property
    def condition_width(self):
        if self.condition_mode == 'mask':
            return 2 * self.dim
        elif self.condition_mode == 'aux':
            return self.aux_dim + 1
        return 0

    @property
    def input_width(self):
        return (self.dim + 2 * N_FREQUENCIES + self.condition_width
                + (self.dim if self.per_coordinate_time else 0))

    @property
    def n_params(self):
        return self.params.size

    def _initial_params(self, rng, n_params):
        params = np.zeros(n_params)
        offset = 0
        for (i, (n_in, n_out)) in enumerate(self.shapes):
            scale = 1.0 / math.sqrt(n_in)
            if i == len(self.shapes) - 1:
                # Small output layer: the initial prediction is close to 0.
                scale *= 0.1
            params[offset:offset + n_in * n_out] = \
                scale * rng.standard_normal(n_in * n_out)
            offset += n_in * n_out + n_out
        return params

    def _bind_layers(self):
        self.layers = []
        offset = 0
        for (n_in, n_out) in self.shapes:
            weights = self.params[offset:offset + n_in * n_out].reshape(
                n_in, n_out)
            offset += n_in * n_out
            bias = self.params[offset:offset + n_out]
            offset += n_out
            self.layers.append((weights, bias))

    def features(self, x, k, condition=None, coord_times=None):
        """
        Assemble the network input for points x at step(s) k.
        """

        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(k, dtype=np.float64), (n,))
        columns = [x, time_embedding(t / self.n_steps)]

        if self.conditional:
            if condition is None:
                condition = self.empty_condition()
            elif condition.mode != self.condition_mode:
                raise ConfigurationError(
                    '{0!r} expects {1} conditioning, got {2}'.format(
                        self, self.condition_mode, condition.mode))
            columns.append(condition.channels(n))
        elif condition is not None:
            raise ConfigurationError(
                '{0!r} does not accept a condition'.format(self))

        if self.per_coordinate_time:
            if coord_times is None:
                coord_times = np.broadcast_to(t[:, None], x.shape)
            columns.append(np.asarray(coord_times, dtype=np.float64)
                           / self.n_steps)
        elif coord_times is not None:
            raise ConfigurationError(
                '{0!r} has no per-coordinate time input'.format(self))

        return np.hstack(columns)

    def empty_condition(self):
        if self.condition_mode == 'mask':
            return ConditioningInput.masked(
                np.zeros(self.dim), np.zeros(self.dim, dtype=bool))
        return ConditioningInput.aux(np.zeros(self.aux_dim), False)

    def forward(self, inputs):
        """
        Evaluate the network.  Returns (output, cache) where the cache
        holds the layer inputs and pre-activations needed by backward.
        """

        activations = [inputs]
        pre = []
        a = inputs
        last = len(self.layers) - 1
        for (i, (weights, bias)) in enumerate(self.layers):
            z = a.dot(weights) + bias
            if i == last:
                return (z, (activations, pre))
            pre.append(z)
            a = silu(z)
            activations.append(a)

    def backward(self, cache, grad_out):
        """
        Reverse-mode pass.  Returns (gradient with respect to the inputs,
        gradient with respect to the flat parameter vector).
        """

        (activations, pre) = cache
        grad_params = np.zeros_like(self.params)
        offsets = np.cumsum([0] + [a * b + b for (a, b) in self.shapes])

        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            (weights, bias) = self.layers[i]
            (n_in, n_out) = self.shapes[i]
            start = offsets[i]
            grad_params[start:start + n_in * n_out] = \
                activations[i].T.dot(g).ravel()
            grad_params[start + n_in * n_out:offsets[i + 1]] = g.sum(axis=0)
            g = g.dot(weights.T)
            if i > 0:
                g = g * silu_grad(pre[i - 1])

        return (g, grad_params)

    def eps(self, x, k, condition=None, coord_times=None):
        (out, _) = self.forward(self.features(x, k, condition, coord_times))
        return out

    def eps_vjp(self, x, k, v, condition=None, coord_times=None):
        (_, cache) = self.forward(self.features(x, k, condition, coord_times))
        (g, _) = self.backward(cache, np.asarray(v, dtype=np.float64))
        return g[:, :self.dim]

    def settings(self):
        return {
            'dim': self.dim,
            'n_steps': self.n_steps,
            'hidden': list(self.hidden),
            'condition_mode': self.condition_mode,
            'aux_dim': self.aux_dim,
            'per_coordinate_time': self.per_coordinate_time,
        }


class ResidualScoreModel(ScoreModel):
    """
    Sum of a frozen model's noise prediction and an h-network correction.
    """

    def __init__(self, base, h_net, condition=None):
        if h_net.dim != base.dim:
            raise ConfigurationError('residual network dimension mismatch')
        self.base = base
        self.h_net = h_net
        self.condition = condition
        self.dim = base.dim

    def __repr__(self):
        return 'ResidualScoreModel({0!r} + {1!r})'.format(
            self.base, self.h_net)

    def eps(self, x, k, condition=None, coord_times=None):
        self.check_inputs(condition, coord_times)
        return (self.base.eps(x, k)
                + self.h_net.eps(x, k, condition=self.condition))

    def eps_vjp(self, x, k, v, condition=None, coord_times=None):
        self.check_inputs(condition, coord_times)
        return (self.base.eps_vjp(x, k, v)
                + self.h_net.eps_vjp(x, k, v, condition=self.condition))


class SGD(object):
    def __init__(self, learning_rate):
        self.learning_rate = learning_rate

    def update(self, params, grad):
        params -= self.learning_rate * grad


class Adam(object):
    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = None
        self.v = None
        self.t = 0

    def update(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)

        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        params -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)


class TrainConfig(namedtuple(
        'TrainConfig',
        ['seed', 'steps', 'batch_size', 'learning_rate', 'optimizer',
         'p_drop', 'mask_probability', 'log_every', 'control_weight',
         'max_backprop_steps'])):
    """
    Training settings.  p_drop is the probability of replacing a row's
    condition by the empty condition.
    """

    __slots__ = ()

    def __new__(cls, seed, steps=1000, batch_size=256, learning_rate=1e-3,
                optimizer='adam', p_drop=0.0, mask_probability=0.5,
                log_every=100, control_weight='simple',
                max_backprop_steps=100):
        if seed is None:
            raise ConfigurationError('a training seed is required')
        if not 0.0 <= p_drop <= 1.0:
            raise ConfigurationError('p_drop must lie in [0, 1]')
        if not 0.0 <= mask_probability <= 1.0:
            raise ConfigurationError('mask_probability must lie in [0, 1]')
        if optimizer not in OPTIMISERS:
            raise ConfigurationError(
                'unknown optimizer "{0}"'.format(optimizer))
        if control_weight not in CONTROL_WEIGHTS:
            raise ConfigurationError(
                'unknown control weight "{0}"'.format(control_weight))
        if steps < 0 or batch_size < 1 or learning_rate <= 0.0:
            raise ConfigurationError(
                'steps must be >= 0, batch_size >= 1, learning_rate > 0')

        return super(TrainConfig, cls).__new__(
            cls, int(seed), int(steps), int(batch_size), float(learning_rate),
            optimizer, float(p_drop), float(mask_probability), int(log_every),
            control_weight, int(max_backprop_steps))

    def make_optimiser(self):
        if self.optimizer == 'sgd':
            return SGD(self.learning_rate)
        return Adam(self.learning_rate)


def train_config_from_config(entries, seed):
    try:
        seed = entries.get('seed', seed)
        return TrainConfig(
            None if seed is None else int(seed),
            steps=int(entries.get('steps', 1000)),
            batch_size=int(entries.get('batch_size', 256)),
            learning_rate=float(entries.get('learning_rate', 1e-3)),
            optimizer=entries.get('optimizer', 'adam'),
            p_drop=float(entries.get('p_drop', 0.0)),
            mask_probability=float(entries.get('mask_probability', 0.5)),
            log_every=int(entries.get('log_every', 100)),
            control_weight=entries.get('control_weight', 'simple'),
            max_backprop_steps=int(entries.get('max_backprop_steps', 100)))

    except ValueError as e:
        raise ConfigurationError(
            'invalid training configuration: {0}'.format(e))


def bernoulli_masks(probability):
    """
    Mask sampler observing each coordinate independently.
    """

    def sampler(rng, n, dim):
        return rng.random((n, dim)) < probability

    return sampler


def fixed_masks(mask):
    mask = np.asarray(mask, dtype=bool)

    def sampler(rng, n, dim):
        return np.broadcast_to(mask, (n, dim)).copy()

    return sampler


def _streams(seed):
    # Data (x0, k, eps) and condition (masks, dropout) draws are separate.
    return block_rngs(seed, 2)


def _optimise(net, cfg, loss_and_grad, what):
    optimiser = cfg.make_optimiser()
    losses = np.empty(cfg.steps)

    logger.info('training %s for %d step(s)', what, cfg.steps)

    for step in range(cfg.steps):
        (loss, grad) = loss_and_grad()

        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            logger.error('%s diverged at step %d (loss %r)', what, step, loss)
            raise DivergenceError(
                '{0} diverged at step {1}'.format(what, step))

        optimiser.update(net.params, grad)
        losses[step] = loss

        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            logger.info('%s step %d loss %.6g', what, step + 1, loss)

    return losses


def _noise_batch(schedule, prior_sampler, rng, n):
    x0 = prior_sampler(rng, n)
    k = rng.integers(1, schedule.n_steps + 1, size=n)
    (x_k, eps) = forward_noise(schedule, k, x0, rng)
    return (x0, k, x_k, eps)


def eps_loss(net, inputs, eps, weight=None):
    """
    Batch mean of |eps_theta - eps|^2 (optionally weighted per entry) and
    its gradient with respect to the network parameters.
    """

    (pred, cache) = net.forward(inputs)
    resid = pred - eps
    if weight is not None:
        resid = resid * weight
    n = eps.shape[0]
    loss = np.einsum('ni,ni->', resid, resid) / n
    (_, grad) = net.backward(cache, 2.0 * resid / n)
    return (loss, grad)


def _drop_masks(masks, rng, p_drop):
    drop = rng.random(masks.shape[0]) < p_drop
    masks[drop] = False
    return masks


def train_unconditional(net, prior_sampler, schedule, cfg):
    """
    Minimise E |eps - eps_theta(x_k, k)|^2 over uniform k and x0 from
    prior_sampler(rng, n).  Returns (net, per-step losses).
    """

    (rng, _) = _streams(cfg.seed)

    def loss_and_grad():
        (_, k, x_k, eps) = _noise_batch(schedule, prior_sampler, rng,
                                        cfg.batch_size)
        return eps_loss(net, net.features(x_k, k), eps)

    return (net, _optimise(net, cfg, loss_and_grad, 'unconditional net'))


def train_amortised(net, prior_sampler, mask_sampler, schedule, cfg):
    """
    Conditional training on random partitions of each data point.

    The whole sample is noised and the network predicts its noise given
    the clean observed part and the mask.  Rows lose their condition with
    probability p_drop, so an empty mask reduces to the unconditional
    objective.
    """

    if net.condition_mode != 'mask':
        raise ConfigurationError('amortised training needs a mask network')

    (rng, rng_cond) = _streams(cfg.seed)

    def loss_and_grad():
        (x0, k, x_k, eps) = _noise_batch(schedule, prior_sampler, rng,
                                         cfg.batch_size)
        masks = _drop_masks(mask_sampler(rng_cond, cfg.batch_size, net.dim),
                            rng_cond, cfg.p_drop)
        condition = ConditioningInput.masked(x0, masks)
        return eps_loss(net, net.features(x_k, k, condition), eps)

    return (net, _optimise(net, cfg, loss_and_grad, 'amortised net'))


def train_classifier_free(net, joint_sampler, schedule, cfg):
    """
    Conditional training on an auxiliary variable y drawn jointly with x0
    by joint_sampler(rng, n) -> (x0, y).  The condition is dropped with
    probability p_drop.
    """

    if net.condition_mode != 'aux':
        raise ConfigurationError(
            'classifier-free training needs an aux-conditioned network')

    (rng, rng_cond) = _streams(cfg.seed)

    def loss_and_grad():
        (x0, y) = joint_sampler(rng, cfg.batch_size)
        k = rng.integers(1, schedule.n_steps + 1, size=cfg.batch_size)
        (x_k, eps) = forward_noise(schedule, k, x0, rng)
        present = rng_cond.random(cfg.batch_size) >= cfg.p_drop
        condition = ConditioningInput.aux(
            np.asarray(y, dtype=np.float64).reshape(cfg.batch_size, -1),
            present)
        return eps_loss(net, net.features(x_k, k, condition), eps)

    return (net, _optimise(net, cfg, loss_and_grad, 'classifier-free net'))


def train_rfdiff_style(net, prior_sampler, mask_sampler, schedule, cfg):
    """
    Motif training: masked coordinates stay clean with time 0, only the
    rest is noised, and the loss covers the noised coordinates only.
    """

    if not net.per_coordinate_time or net.conditional:
        raise ConfigurationError(
            'motif training needs an unconditioned network with '
            'per-coordinate time input')

    (rng, rng_cond) = _streams(cfg.seed)

    def loss_and_grad():
        (x0, k, x_k, eps) = _noise_batch(schedule, prior_sampler, rng,
                                         cfg.batch_size)
        masks = _drop_masks(mask_sampler(rng_cond, cfg.batch_size, net.dim),
                            rng_cond, cfg.p_drop)
        x_k = np.where(masks, x0, x_k)
        coord_times = np.where(masks, 0, k[:, None])
        inputs = net.features(x_k, k, coord_times=coord_times)
        return eps_loss(net, inputs, eps, weight=~masks)

    return (net, _optimise(net, cfg, loss_and_grad, 'motif net'))


def offline_loss(frozen_net, h_net, x_k, k, eps, condition):
    """
    Residual loss |eps_theta + eps_phi - eps|^2 and its gradient with
    respect to the h-network parameters only.
    """

    base = frozen_net.eps(x_k, k)
    (pred, cache) = h_net.forward(h_net.features(x_k, k, condition))
    resid = base + pred - eps
    n = eps.shape[0]
    loss = np.einsum('ni,ni->', resid, resid) / n
    (_, grad) = h_net.backward(cache, 2.0 * resid / n)
    return (loss, grad)


def finetune_offline(frozen_net, h_net, prior_sampler, mask_sampler,
                     schedule, cfg):
    """
    Train an h-network on the residual of a frozen unconditional network,
    so that sampling with eps_theta + eps_phi targets the conditional law.
    """

    if h_net.condition_mode != 'mask' or h_net.dim != frozen_net.dim:
        raise ConfigurationError(
            'offline finetuning needs a mask-conditioned h network')

    (rng, rng_cond) = _streams(cfg.seed)

    def loss_and_grad():
        (x0, k, x_k, eps) = _noise_batch(schedule, prior_sampler, rng,
                                         cfg.batch_size)
        masks = _drop_masks(mask_sampler(rng_cond, cfg.batch_size, h_net.dim),
                            rng_cond, cfg.p_drop)
        return offline_loss(frozen_net, h_net, x_k, k, eps,
                            ConditioningInput.masked(x0, masks))

    return (h_net, _optimise(h_net, cfg, loss_and_grad, 'h network'))


def control_weights(schedule, kind='simple'):
    """
    Per-step running-cost weights c_k on |f|^2 for a control f expressed
    on the noise scale.

    'simple' is beta_k / (2 (1 - ab_k)); 'exact' replaces beta_k / 2 by
    2 lambda_k^2 / beta_k with lambda_k = 1 - sqrt(1 - beta_k).
    """

    betas = schedule.betas
    one_minus = 1.0 - schedule.alpha_bars
    if kind == 'simple':
        return betas / (2.0 * one_minus)
    elif kind == 'exact':
        lam = 1.0 - np.sqrt(1.0 - betas)
        return 2.0 * lam * lam / betas / one_minus
    raise ConfigurationError('unknown control weight "{0}"'.format(kind))


def _check_control_task(schedule, obs, limit):
    if obs.is_hard:
        raise ConfigurationError(
            'control finetuning needs a soft observation likelihood')
    if schedule.n_steps > limit:
        raise ConfigurationError(
            '{0} steps exceed the backpropagation limit of {1}'.format(
                schedule.n_steps, limit))


def _step_coefficients(schedule, k):
    beta = schedule.beta(k)
    ab = schedule.alpha_bar(k)
    return (beta / math.sqrt(1.0 - ab), math.sqrt(1.0 - beta),
            math.sqrt(beta))


def control_objective(frozen_net, control, obs, schedule, n_chains, rng,
                      weight='simple'):
    """
    Evaluate sum_k c_k |f_k|^2 - ln p(y | x_0) along controlled reverse
    chains, where the control f = control(x, k) is added to the frozen
    noise prediction (control None means zero control).

    Returns (mean, standard error) over chains.
    """

    if obs.is_hard:
        raise ConfigurationError(
            'the control objective needs a soft observation likelihood')

    weights = control_weights(schedule, weight)
    x = rng.standard_normal((n_chains, frozen_net.dim))
    cost = np.zeros(n_chains)

    for k in range(schedule.n_steps, 0, -1):
        (b, s, sigma) = _step_coefficients(schedule, k)
        eps = frozen_net.eps(x, k)
        if control is not None:
            f = control(x, k)
            cost += weights[k - 1] * np.einsum('ni,ni->n', f, f)
            eps = eps + f
        x = (x - b * eps) / s
        if k > 1:
            x = x + sigma * rng.standard_normal(x.shape)

    (loglik, _) = obs.log_likelihood(x)
    total = cost - loglik
    return (total.mean(), total.std(ddof=1) / math.sqrt(n_chains))


def analytic_control(h):
    """
    Control equal to the exact h-transform correction on the noise scale,
    -sqrt(1 - ab_k) grad ln h(k, x).
    """

    def control(x, k):
        scale = math.sqrt(1.0 - h.schedule.alpha_bar(k))
        return -scale * h.value_and_grad(k, x).grad_log

    return control


def net_control(f_net):
    def control(x, k):
        return f_net.eps(x, k)

    return control


def control_loss_and_grad(frozen_net, f_net, obs, schedule, weights, x,
                          noise):
    """
    Objective sum_k c_k |f_k|^2 - ln p(y | x_0), averaged over chains, and
    its gradient with respect to the control network parameters.

    Arguments:
    x     : n x d starting states x_N
    noise : N x n x d standard normal draws; noise[k - 1] is used by the
            step from k to k-1 (unused for k = 1)

    The gradient is accumulated by the adjoint recursion backwards from
    x_0 through each reverse step, including the Jacobians of the frozen
    and control predictions.
    """

    n_steps = schedule.n_steps
    n = x.shape[0]
    states = {}
    caches = {}
    controls = {}
    cost = np.zeros(n)

    for k in range(n_steps, 0, -1):
        (b, s, sigma) = _step_coefficients(schedule, k)
        (f, cache) = f_net.forward(f_net.features(x, k))
        states[k] = x
        caches[k] = cache
        controls[k] = f
        cost += weights[k - 1] * np.einsum('ni,ni->n', f, f)
        x = (x - b * (frozen_net.eps(x, k) + f)) / s
        if k > 1:
            x = x + sigma * noise[k - 1]

    (loglik, grad_loglik) = obs.log_likelihood(x)
    loss = np.mean(cost - loglik)

    adjoint = -grad_loglik / n
    grad = np.zeros_like(f_net.params)
    for k in range(1, n_steps + 1):
        (b, s, _) = _step_coefficients(schedule, k)
        u = adjoint / s
        w = -b * u + 2.0 * weights[k - 1] * controls[k] / n
        (g_in, g_params) = f_net.backward(caches[k], w)
        grad += g_params
        adjoint = (u - b * frozen_net.eps_vjp(states[k], k, u)
                   + g_in[:, :f_net.dim])

    return (loss, grad)


def finetune_control(frozen_net, f_net, obs, schedule, cfg):
    """
    Fit a control network by backpropagation through the controlled
    reverse chain, minimising the running control cost minus the terminal
    log-likelihood.  Returns (f_net, per-step objective values).
    """

    _check_control_task(schedule, obs, cfg.max_backprop_steps)
    if f_net.conditional or f_net.dim != frozen_net.dim:
        raise ConfigurationError(
            'the control network must be unconditioned and match the '
            'frozen network dimension')

    weights = control_weights(schedule, cfg.control_weight)
    shape = (cfg.batch_size, f_net.dim)
    (rng, _) = _streams(cfg.seed)

    def loss_and_grad():
        x = rng.standard_normal(shape)
        noise = rng.standard_normal((schedule.n_steps,) + shape)
        return control_loss_and_grad(frozen_net, f_net, obs, schedule,
                                     weights, x, noise)

    return (f_net, _optimise(f_net, cfg, loss_and_grad, 'control net'))


def save_checkpoint(pathname, net, config_text=''):
    """
    Write a network: magic, header length (little-endian uint32), a JSON
    header with the layer settings and the configuration echo, then the
    parameters as little-endian doubles.
    """

    header = dict(net.settings())
    header['format'] = CHECKPOINT_FORMAT
    header['widths'] = list(net.widths)
    header['config'] = config_text
    encoded = json.dumps(header, sort_keys=True).encode('utf-8')

    with atomic_path(pathname) as tmpname:
        with open(tmpname, 'wb') as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack('<I', len(encoded)))
            f.write(encoded)
            f.write(np.asarray(net.params, dtype='<f8').tobytes())


def load_checkpoint(pathname):
    """
    Read a network written by save_checkpoint.  Returns (net, header).
    """

    try:
        with open(pathname, 'rb') as f:
            magic = f.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise ConfigurationError(
                    '{0} is not a network checkpoint'.format(pathname))
            (length,) = struct.unpack('<I', f.read(4))
            header = json.loads(f.read(length).decode('utf-8'))
            params = np.frombuffer(f.read(), dtype='<f8')

    except (IOError, OSError) as e:
        raise ConfigurationError(
            'cannot read checkpoint {0}: {1}'.format(pathname, e))

    if header.get('format') != CHECKPOINT_FORMAT:
        raise ConfigurationError(
            'unsupported checkpoint format in {0}'.format(pathname))

    net = EpsNet(header['dim'], header['n_steps'], hidden=header['hidden'],
                 condition_mode=header['condition_mode'],
                 aux_dim=header['aux_dim'],
                 per_coordinate_time=header['per_coordinate_time'],
                 params=params)

    return (net, header)
