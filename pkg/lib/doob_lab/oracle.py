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
import logging
import math

import numpy as np
from scipy.special import log_ndtr, logsumexp, softmax
from scipy.stats import multivariate_normal

from doob_lab import __version__
from doob_lab.engine import ScoreModel
from doob_lab.error import ConfigurationError, DomainError, NumericalError

__doc__ = """
Analytic score models and Doob's h-transforms for Gaussian-mixture priors
under the variance-preserving forward process.

For a component N(m, S) noised to step k the marginal is
N(sqrt(ab) m, ab S + (1 - ab) I) with ab = alpha_bar_k, and the denoising
posterior p(x_0 | x_k) is Gaussian with gain G = sqrt(ab) S C^-1,
mean m + G (x_k - sqrt(ab) m) and covariance S - sqrt(ab) G S, where C is
the marginal covariance.  Mixtures carry per-component responsibilities.

Version: """ + __version__.version

logger = logging.getLogger(__name__)

LOG_UNDERFLOW = math.log(1e-300)
LOG_2PI = math.log(2.0 * math.pi)
TWEEDIE_MIN_ALPHA_BAR = 1e-12

DenoisingPosterior = namedtuple(
    'DenoisingPosterior',
    ['log_weights', 'means', 'covariances', 'gains', 'scores'])

HValue = namedtuple('HValue', ['value', 'log_value', 'grad_log', 'underflow'])


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1) if dim > 1 or x.size == 1 else x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] != dim:
        raise DomainError('expected points of dimension {0}, got shape {1}'
                          .format(dim, x.shape))
    return x


class GaussianMixturePrior(object):
    """
    Mixture of Gaussians sum_m w_m N(m_m, S_m) on R^d.
    """

    def __init__(self, weights, means, covariances=None, variances=None):
        """
        Arguments:
        weights     : M mixture weights summing to one
        means       : M x d component means
        covariances : M x d x d symmetric positive definite matrices
        variances   : M x d diagonal variances (alternative to covariances)
        """

        weights = np.array(weights, dtype=np.float64).ravel()
        means = np.array(means, dtype=np.float64)
        if means.ndim == 1:
            means = means.reshape(weights.size, -1)

        if (covariances is None) == (variances is None):
            raise ConfigurationError(
                'give exactly one of covariances and variances')

        if variances is not None:
            variances = np.array(variances, dtype=np.float64).reshape(
                means.shape)
            if not np.all(variances > 0.0):
                raise ConfigurationError(
                    'component variances must be positive')
            covariances = np.array([np.diag(v) for v in variances])
        else:
            covariances = np.array(covariances, dtype=np.float64).reshape(
                means.shape + (means.shape[1],))

        if weights.size < 1 or means.shape[0] != weights.size:
            raise ConfigurationError(
                'need one mean per mixture weight')
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigurationError('mixture weights must sum to one')
        if not np.allclose(covariances, np.swapaxes(covariances, 1, 2)):
            raise ConfigurationError('covariances must be symmetric')

        try:
            chol = np.linalg.cholesky(covariances)
        except np.linalg.LinAlgError:
            raise ConfigurationError(
                'covariances must be positive definite')

        self.weights = weights
        self.means = means
        self.covariances = covariances
        self._chol = chol
        self._precisions = np.linalg.inv(covariances)
        self._log_norm = (
            -np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
            - 0.5 * self.dim * LOG_2PI)

    @classmethod
    def gaussian(cls, mean, covariance):
        """
        Single-component prior N(mean, covariance).
        """

        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        covariance = np.asarray(covariance, dtype=np.float64).reshape(
            mean.size, mean.size)
        return cls([1.0], [mean], covariances=[covariance])

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.size

    def __repr__(self):
        return 'GaussianMixturePrior(M={0}, d={1})'.format(
            self.n_components, self.dim)

    def sample(self, rng, n, return_labels=False):
        """
        Draw n samples.  Component labels are drawn first, then the
        standard normal deviates, so the stream consumption is fixed by n.
        """

        labels = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        x = self.means[labels] + np.einsum(
            'nij,nj->ni', self._chol[labels], z)

        if return_labels:
            return (x, labels)
        return x

    def component_log_densities(self, x):
        """
        Return the n x M array log w_m + log N(x | m_m, S_m).
        """

        x = _as_batch(x, self.dim)
        diff = x[:, None, :] - self.means[None, :, :]
        quad = np.einsum('nmi,mij,nmj->nm', diff, self._precisions, diff)
        return np.log(self.weights) + self._log_norm - 0.5 * quad

    def log_density(self, x):
        return logsumexp(self.component_log_densities(x), axis=1)

    def responsibilities(self, x):
        return softmax(self.component_log_densities(x), axis=1)

    def component_scores(self, x):
        """
        Return the n x M x d array of per-component scores -P_m (x - m_m).
        """

        x = _as_batch(x, self.dim)
        diff = x[:, None, :] - self.means[None, :, :]
        return -np.einsum('mij,nmj->nmi', self._precisions, diff)

    def score(self, x):
        """
        Gradient of the log-density, stabilised through log-sum-exp
        responsibilities.
        """

        resp = self.responsibilities(x)
        return np.einsum('nm,nmi->ni', resp, self.component_scores(x))

    def score_vjp(self, x, v):
        """
        Product of the (symmetric) Hessian of the log-density with v.
        """

        x = _as_batch(x, self.dim)
        v = _as_batch(v, self.dim)
        resp = self.responsibilities(x)
        comp = self.component_scores(x)
        total = np.einsum('nm,nmi->ni', resp, comp)

        curvature = -np.einsum('mij,nj->nmi', self._precisions, v)
        outer = comp * np.einsum('nmi,ni->nm', comp, v)[:, :, None]
        return (np.einsum('nm,nmi->ni', resp, curvature + outer)
                - total * np.einsum('ni,ni->n', total, v)[:, None])

    def marginal(self, schedule, k):
        """
        Return the law of the forward-noised variable at step k as a
        new mixture.
        """

        if k == 0:
            return self

        ab = float(schedule.alpha_bar(k))
        return GaussianMixturePrior(
            self.weights, math.sqrt(ab) * self.means,
            covariances=(ab * self.covariances
                         + (1.0 - ab) * np.eye(self.dim)))

    def marginals(self, schedule):
        """
        Tuple of the noised marginals for k = 0 .. N.
        """

        return tuple(self.marginal(schedule, k)
                     for k in range(schedule.n_steps + 1))

    def denoising_posterior(self, schedule, k, x):
        """
        Per-component Gaussian posterior p(x_0 | x_k = x).

        Returns a DenoisingPosterior with log_weights (n x M, normalised),
        means (n x M x d), covariances (M x d x d), gains (M x d x d, the
        Jacobian of each posterior mean with respect to x) and scores
        (n x M x d, the component scores of the noised marginal).
        """

        x = _as_batch(x, self.dim)
        ab = schedule.alpha_bar(k)
        marginal = self.marginal(schedule, k)
        root = math.sqrt(ab)

        gains = root * np.einsum(
            'mij,mjk->mik', self.covariances, marginal._precisions)
        diff = x[:, None, :] - root * self.means[None, :, :]
        means = self.means[None, :, :] + np.einsum('mij,nmj->nmi', gains, diff)
        covariances = self.covariances - root * np.einsum(
            'mij,mjk->mik', gains, self.covariances)
        covariances = 0.5 * (covariances + np.swapaxes(covariances, 1, 2))

        log_weights = marginal.component_log_densities(x)
        log_weights = log_weights - logsumexp(log_weights, axis=1)[:, None]

        return DenoisingPosterior(
            log_weights, means, covariances, gains,
            marginal.component_scores(x))

    def mean(self):
        return np.einsum('m,mi->i', self.weights, self.means)

    def covariance(self):
        mu = self.mean()
        second = np.einsum(
            'm,mij->ij', self.weights,
            self.covariances + np.einsum('mi,mj->mij', self.means, self.means))
        return second - np.outer(mu, mu)


def prior_from_config(entries):
    """
    Build a GaussianMixturePrior from flat configuration entries.

    Keys: weights (comma list, default a single component), means
    (vectors separated by ';'), and either variances (diagonal, vectors
    separated by ';') or covariances (row-major d*d per component,
    separated by ';').
    """

    try:
        means = _parse_vectors(entries['means'])
        if 'weights' in entries:
            weights = [float(w) for w in entries['weights'].split(',')]
        else:
            weights = [1.0 / len(means)] * len(means)

        if 'covariances' in entries:
            return GaussianMixturePrior(
                weights, means,
                covariances=_parse_vectors(entries['covariances']))

        return GaussianMixturePrior(
            weights, means,
            variances=_parse_vectors(entries.get(
                'variances', ';'.join(
                    ','.join(['1.0'] * len(m)) for m in means))))

    except (KeyError, ValueError) as e:
        raise ConfigurationError(
            'invalid prior configuration: {0}'.format(e))


def _parse_vectors(text):
    return [[float(v) for v in part.split(',')]
            for part in text.split(';') if part.strip()]


class Interval(object):
    """
    Open interval (a, b) on the real line; either end may be infinite.
    """

    def __init__(self, a, b):
        a = float(a)
        b = float(b)
        if not a < b:
            raise ConfigurationError(
                'interval needs a < b, got ({0}, {1})'.format(a, b))
        self.a = a
        self.b = b

    def __repr__(self):
        return 'Interval({0!r}, {1!r})'.format(self.a, self.b)

    def contains(self, x):
        x = np.asarray(x)
        return (x > self.a) & (x < self.b)

    def distance(self, x):
        """
        Distance of each point from the interval (zero inside).
        """

        x = np.asarray(x, dtype=np.float64)
        return np.maximum(np.maximum(self.a - x, x - self.b), 0.0)


class Observation(object):
    """
    Linear measurement y = A x_0 + noise_std * eta.

    The operator is either a coordinate mask (A selects the masked
    coordinates in increasing order) or a general matrix.  noise_std = 0
    encodes the hard constraint A x_0 = y.
    """

    def __init__(self, y, mask=None, matrix=None, noise_std=0.0):
        """
        Arguments:
        y         : observed values, one per selected coordinate / row
        mask      : boolean vector of length d (mask operator)
        matrix    : n x d array (matrix operator)
        noise_std : standard deviation of the observation noise (>= 0)
        """

        y = np.atleast_1d(np.asarray(y, dtype=np.float64)).ravel()
        noise_std = float(noise_std)

        if (mask is None) == (matrix is None):
            raise ConfigurationError(
                'an observation needs exactly one of mask and matrix')
        if noise_std < 0.0 or not np.isfinite(noise_std):
            raise ConfigurationError('noise_std must be finite and >= 0')

        if mask is not None:
            mask = np.asarray(mask, dtype=bool).ravel()
            if mask.sum() != y.size:
                raise ConfigurationError(
                    'mask selects {0} coordinates but y has {1}'.format(
                        mask.sum(), y.size))
            matrix = np.eye(mask.size)[mask]
            self.kind = 'mask'
        else:
            matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
            if matrix.shape[0] != y.size:
                raise ConfigurationError(
                    'matrix has {0} rows but y has {1}'.format(
                        matrix.shape[0], y.size))
            self.kind = 'matrix'

        self.y = y
        self.mask = mask
        self.matrix = matrix
        self.noise_std = noise_std

    def __repr__(self):
        return 'Observation(kind={0!r}, n={1}, noise_std={2!r})'.format(
            self.kind, self.y.size, self.noise_std)

    @property
    def dim(self):
        return self.matrix.shape[1]

    @property
    def n_observed(self):
        return self.y.size

    @property
    def is_hard(self):
        return self.noise_std == 0.0

    def apply(self, x):
        """
        Return A x for each row of x.
        """

        return _as_batch(x, self.dim).dot(self.matrix.T)

    def residual(self, x):
        return self.apply(x) - self.y

    def log_likelihood(self, x):
        """
        Return (ln p(y | x), gradient with respect to x) for each row.
        Only defined for soft observations.
        """

        if self.is_hard:
            raise ConfigurationError(
                'a hard constraint has no differentiable likelihood')

        var = self.noise_std ** 2
        resid = self.y - self.apply(x)
        value = (-0.5 * np.einsum('ni,ni->n', resid, resid) / var
                 - 0.5 * self.n_observed * (LOG_2PI + math.log(var)))
        return (value, resid.dot(self.matrix) / var)


def observation_from_config(entries):
    """
    Build an Observation (or an Interval) from flat configuration entries.

    Keys: kind (mask, matrix, interval or none), mask (comma list of 0/1),
    matrix (rows separated by ';'), y, noise_std, lower, upper.
    """

    kind = entries.get('kind', 'none')

    try:
        if kind == 'none':
            return None
        elif kind == 'interval':
            return Interval(float(entries.get('lower', '-inf')),
                            float(entries.get('upper', 'inf')))

        y = [float(v) for v in entries['y'].split(',')]
        noise_std = float(entries.get('noise_std', 0.0))

        if kind == 'mask':
            mask = [bool(int(v)) for v in entries['mask'].split(',')]
            return Observation(y, mask=mask, noise_std=noise_std)
        elif kind == 'matrix':
            return Observation(y, matrix=_parse_vectors(entries['matrix']),
                               noise_std=noise_std)

    except (KeyError, ValueError) as e:
        raise ConfigurationError(
            'invalid observation configuration: {0}'.format(e))

    raise ConfigurationError('unknown observation kind "{0}"'.format(kind))


def log_ndtr_diff(lo, hi):
    """
    Return ln(Phi(hi) - Phi(lo)) for lo <= hi without cancellation, by
    working in whichever tail keeps both arguments non-positive.
    """

    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)

    flip = lo > 0.0
    upper = np.where(flip, -lo, hi)
    lower = np.where(flip, -hi, lo)

    with np.errstate(invalid='ignore', divide='ignore', over='ignore'):
        log_upper = log_ndtr(upper)
        log_lower = log_ndtr(lower)
        return log_upper + np.log1p(-np.exp(log_lower - log_upper))


def _log_phi(z):
    with np.errstate(over='ignore', invalid='ignore'):
        return -0.5 * z * z - 0.5 * LOG_2PI


class HTransform(object):
    """
    Doob's h-transform h(k, x) = P(event | X_k = x) for a Gaussian-mixture
    prior.

    Two events are supported: X_0 in an interval (one-dimensional priors)
    and the linear-Gaussian observation, for which h(k, x) is the noised
    likelihood p(y | X_k = x).
    """

    def __init__(self, kind, prior, schedule, interval=None,
                 observation=None):
        if not isinstance(prior, GaussianMixturePrior):
            raise ConfigurationError(
                'an analytic h-transform needs a Gaussian-mixture prior')

        if kind == 'interval':
            if prior.dim != 1:
                raise ConfigurationError(
                    'interval h-transforms are one-dimensional')
            if not isinstance(interval, Interval):
                raise ConfigurationError('interval h-transform needs bounds')
        elif kind == 'linear_gaussian':
            if not isinstance(observation, Observation):
                raise ConfigurationError(
                    'linear-Gaussian h-transform needs an observation')
            if observation.dim != prior.dim:
                raise ConfigurationError(
                    'observation and prior dimensions differ')
        else:
            raise ConfigurationError(
                'unknown h-transform kind "{0}"'.format(kind))

        self.kind = kind
        self.prior = prior
        self.schedule = schedule
        self.interval = interval
        self.observation = observation

    @classmethod
    def for_interval(cls, prior, schedule, a, b):
        return cls('interval', prior, schedule, interval=Interval(a, b))

    @classmethod
    def for_observation(cls, prior, schedule, observation):
        return cls('linear_gaussian', prior, schedule,
                   observation=observation)

    def __repr__(self):
        return 'HTransform(kind={0!r})'.format(self.kind)

    def value_and_grad(self, k, x, schedule=None):
        """
        Evaluate h and the gradient of ln h at step k (1..N) for each row
        of x.  Returns an HValue; when h underflows below 1e-300 the value
        is reported as 0 with the underflow flag set, and callers must use
        log_value and grad_log, which stay finite.
        """

        schedule = self.schedule if schedule is None else schedule
        if k < 1:
            raise DomainError('h-transform is evaluated at steps 1..N')

        x = _as_batch(x, self.prior.dim)
        post = self.prior.denoising_posterior(schedule, k, x)

        if self.kind == 'interval':
            (log_terms, grads) = self._interval_terms(post)
        else:
            (log_terms, grads) = self._observation_terms(post)

        # Gradient of the log mixture weights of p(x_0 | x_k).
        resp = np.exp(post.log_weights)
        total_score = np.einsum('nm,nmi->ni', resp, post.scores)
        grads = grads + post.scores - total_score[:, None, :]

        log_value = logsumexp(log_terms, axis=1)
        rho = softmax(log_terms, axis=1)
        grad_log = np.einsum('nm,nmi->ni', rho, grads)

        underflow = log_value < LOG_UNDERFLOW
        value = np.where(underflow, 0.0, np.exp(log_value))

        return HValue(value, log_value, grad_log, underflow)

    def _interval_terms(self, post):
        a = self.interval.a
        b = self.interval.b

        sd = np.sqrt(post.covariances[:, 0, 0])
        gain = post.gains[:, 0, 0]
        mu = post.means[:, :, 0]

        with np.errstate(invalid='ignore'):
            lo = (a - mu) / sd
            hi = (b - mu) / sd

        log_mass = log_ndtr_diff(lo, hi)

        with np.errstate(invalid='ignore', over='ignore'):
            ratio = (np.exp(_log_phi(hi) - log_mass)
                     - np.exp(_log_phi(lo) - log_mass))
        ratio = np.where(np.isinf(lo) & np.isinf(hi), 0.0, ratio)

        grads = (-(gain / sd) * ratio)[:, :, None]

        return (post.log_weights + log_mass, grads)

    def _observation_terms(self, post):
        obs = self.observation
        A = obs.matrix
        n_obs = obs.n_observed

        q = (np.einsum('ij,mjk,lk->mil', A, post.covariances, A)
             + obs.noise_std ** 2 * np.eye(n_obs))
        try:
            q_inv = np.linalg.inv(q)
        except np.linalg.LinAlgError:
            raise NumericalError(
                'predictive covariance of the observation is singular')
        (_, logdet) = np.linalg.slogdet(q)

        resid = obs.y[None, None, :] - np.einsum('ij,nmj->nmi', A, post.means)
        weighted = np.einsum('mij,nmj->nmi', q_inv, resid)
        log_lik = (-0.5 * np.einsum('nmi,nmi->nm', resid, weighted)
                   - 0.5 * logdet - 0.5 * n_obs * LOG_2PI)

        # Chain rule through the posterior mean: G^T A^T Q^-1 (y - A mu).
        grads = np.einsum('mji,nmj->nmi', post.gains,
                          np.einsum('ji,nmj->nmi', A, weighted))

        return (post.log_weights + log_lik, grads)


def h_value_and_grad(h, schedule, k, x):
    """
    Evaluate an HTransform at step k: returns HValue(value, log_value,
    grad_log, underflow).
    """

    return h.value_and_grad(k, x, schedule=schedule)


def marginal_score(prior, schedule, k, x):
    """
    Score of the forward-noised prior at step k, for each row of x.
    """

    return prior.marginal(schedule, k).score(x)


def eps_to_score(schedule, k, eps):
    return -np.asarray(eps) / math.sqrt(1.0 - schedule.alpha_bar(k))


def score_to_eps(schedule, k, score):
    return -math.sqrt(1.0 - schedule.alpha_bar(k)) * np.asarray(score)


def tweedie_denoise(score_model, schedule, k, x, condition=None,
                    coord_times=None):
    """
    Posterior-mean estimate of x_0 from x_k by Tweedie's formula,
    x0_hat = (x - sqrt(1 - ab) eps_hat) / sqrt(ab).
    """

    ab = schedule.alpha_bar(k)
    if ab < TWEEDIE_MIN_ALPHA_BAR:
        raise NumericalError(
            'alpha_bar_{0} = {1:g} is too small for Tweedie denoising'.format(
                k, ab))

    x = np.asarray(x, dtype=np.float64)
    if ab == 1.0:
        return x.copy()

    eps = score_model.eps(x, k, condition=condition, coord_times=coord_times)
    return (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def tweedie_vjp(score_model, schedule, k, x, v, condition=None,
                stop_gradient=False):
    """
    Vector-Jacobian product v^T d(x0_hat)/dx of the Tweedie map.  With
    stop_gradient the Jacobian of the noise prediction is ignored.
    """

    ab = schedule.alpha_bar(k)
    if ab < TWEEDIE_MIN_ALPHA_BAR:
        raise NumericalError(
            'alpha_bar_{0} = {1:g} is too small for Tweedie denoising'.format(
                k, ab))

    v = np.asarray(v, dtype=np.float64)
    if stop_gradient or ab == 1.0:
        return v / math.sqrt(ab)

    jv = score_model.eps_vjp(x, k, v, condition=condition)
    return (v - math.sqrt(1.0 - ab) * jv) / math.sqrt(ab)


class OracleScoreModel(ScoreModel):
    """
    Exact noise prediction for a Gaussian-mixture prior,
    eps_hat = -sqrt(1 - ab) * score.  k may be one step or one step per
    row, as in training batches.
    """

    def __init__(self, prior, schedule):
        self.prior = prior
        self.schedule = schedule
        self.dim = prior.dim
        # Built once here; sampler threads only read them.
        self.marginals = prior.marginals(schedule)

    def __repr__(self):
        return 'OracleScoreModel({0!r})'.format(self.prior)

    def _by_step(self, x, k, evaluate):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if np.ndim(k) == 0:
            k = int(k)
            scale = math.sqrt(1.0 - self.schedule.alpha_bar(k))
            return -scale * evaluate(self.marginals[k], slice(None))

        k = np.asarray(k).ravel()
        out = np.empty_like(x)
        for step in np.unique(k):
            rows = k == step
            scale = math.sqrt(1.0 - self.schedule.alpha_bar(int(step)))
            out[rows] = -scale * evaluate(self.marginals[int(step)], rows)
        return out

    def eps(self, x, k, condition=None, coord_times=None):
        self.check_inputs(condition, coord_times)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return self._by_step(x, k, lambda m, rows: m.score(x[rows]))

    def eps_vjp(self, x, k, v, condition=None, coord_times=None):
        self.check_inputs(condition, coord_times)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), x.shape)
        return self._by_step(
            x, k, lambda m, rows: m.score_vjp(x[rows], v[rows]))


class PosteriorOracle(object):
    """
    Exact posterior of a Gaussian-mixture prior given an observation.

    The posterior is held as a mixture over the free coordinates; under a
    hard mask constraint the observed coordinates are fixed at y.
    """

    def __init__(self, dim, free, mixture, fixed=None, fixed_values=None):
        """
        Arguments:
        dim          : dimension of the full space
        free         : indices of the coordinates with non-degenerate law
        mixture      : GaussianMixturePrior over the free coordinates
                       (None when every coordinate is fixed)
        fixed        : indices of coordinates pinned by a hard constraint
        fixed_values : values of the pinned coordinates
        """

        self.dim = dim
        self.free = np.asarray(free, dtype=int)
        self.mixture = mixture
        self.fixed = np.asarray([] if fixed is None else fixed, dtype=int)
        self.fixed_values = np.asarray(
            [] if fixed_values is None else fixed_values, dtype=np.float64)

    def __repr__(self):
        return 'PosteriorOracle(d={0}, free={1})'.format(
            self.dim, list(self.free))

    def sample(self, rng, n):
        x = np.empty((n, self.dim))
        if self.mixture is not None:
            x[:, self.free] = self.mixture.sample(rng, n)
        x[:, self.fixed] = self.fixed_values
        return x

    def log_density(self, x):
        """
        Log-density of the free coordinates of each row of x.
        """

        x = _as_batch(x, self.dim)
        return self.mixture.log_density(x[:, self.free])

    def mean(self):
        mu = np.empty(self.dim)
        mu[self.fixed] = self.fixed_values
        if self.mixture is not None:
            mu[self.free] = self.mixture.mean()
        return mu

    def covariance(self):
        cov = np.zeros((self.dim, self.dim))
        if self.mixture is not None:
            cov[np.ix_(self.free, self.free)] = self.mixture.covariance()
        return cov

    def marginal(self, schedule, k):
        """
        Law of the posterior pushed through the forward kernel to step k,
        as a mixture over the full space.  Needs k >= 1 when coordinates
        are fixed.
        """

        ab = schedule.alpha_bar(k)
        if len(self.fixed) and ab >= 1.0:
            raise DomainError('a constrained posterior is degenerate at k=0')

        m = self.mixture
        n_comp = 1 if m is None else m.n_components
        weights = np.ones(1) if m is None else m.weights
        means = np.empty((n_comp, self.dim))
        covs = np.zeros((n_comp, self.dim, self.dim))
        means[:, self.fixed] = self.fixed_values
        if m is not None:
            means[:, self.free] = m.means
            covs[np.ix_(np.arange(n_comp), self.free, self.free)] = \
                m.covariances

        return GaussianMixturePrior(
            weights, math.sqrt(ab) * means,
            covariances=ab * covs + (1.0 - ab) * np.eye(self.dim))

    def marginal_score(self, schedule, k, x):
        return self.marginal(schedule, k).score(x)

    def density_table(self, lo, hi, n_points):
        """
        Return (grid, density) of a one-dimensional free block, for
        plotting or CSV export.
        """

        if self.mixture is None or self.mixture.dim != 1:
            raise ConfigurationError(
                'density tables need exactly one free coordinate')

        grid = np.linspace(lo, hi, int(n_points))
        return (grid, np.exp(self.mixture.log_density(grid[:, None])))


def true_posterior(prior, obs):
    """
    Exact posterior of a Gaussian-mixture prior given an observation.

    A hard mask constraint conditions each component on the observed
    coordinates and reweights components by the marginal likelihood of
    the observed block.  A soft constraint applies the conjugate
    linear-Gaussian update to every component.  Hard constraints through a
    general matrix are not supported.
    """

    if obs.dim != prior.dim:
        raise ConfigurationError('observation and prior dimensions differ')

    logs = []
    means = []
    covs = []

    if obs.is_hard:
        if obs.kind != 'mask':
            raise ConfigurationError(
                'hard constraints are only supported for mask operators')

        observed = np.flatnonzero(obs.mask)
        free = np.flatnonzero(~obs.mask)

        for (w, m, s) in zip(prior.weights, prior.means, prior.covariances):
            s_oo = s[np.ix_(observed, observed)]
            s_fo = s[np.ix_(free, observed)]
            gain = np.linalg.solve(s_oo, s_fo.T).T
            logs.append(math.log(w) + multivariate_normal.logpdf(
                obs.y, mean=m[observed], cov=s_oo))
            means.append(m[free] + gain.dot(obs.y - m[observed]))
            covs.append(s[np.ix_(free, free)] - gain.dot(s_fo.T))

        weights = softmax(np.array(logs))
        mixture = None
        if free.size:
            mixture = GaussianMixturePrior(
                _renormalise(weights), means,
                covariances=[0.5 * (c + c.T) for c in covs])

        return PosteriorOracle(prior.dim, free, mixture,
                               fixed=observed, fixed_values=obs.y)

    A = obs.matrix
    noise = obs.noise_std ** 2 * np.eye(obs.n_observed)
    for (w, m, s) in zip(prior.weights, prior.means, prior.covariances):
        predictive = A.dot(s).dot(A.T) + noise
        gain = np.linalg.solve(predictive, A.dot(s)).T
        logs.append(math.log(w) + multivariate_normal.logpdf(
            obs.y, mean=A.dot(m), cov=predictive))
        means.append(m + gain.dot(obs.y - A.dot(m)))
        c = s - gain.dot(A).dot(s)
        covs.append(0.5 * (c + c.T))

    weights = softmax(np.array(logs))
    mixture = GaussianMixturePrior(_renormalise(weights), means,
                                   covariances=covs)

    return PosteriorOracle(prior.dim, np.arange(prior.dim), mixture)


def _renormalise(weights):
    # Keep the sum within the mixture's 1e-12 tolerance.
    weights = np.maximum(weights, 0.0)
    return weights / weights.sum()
