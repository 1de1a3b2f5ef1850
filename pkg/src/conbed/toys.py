"""Small models with finitely many parameter values, where posteriors and EIG are exact.

They serve as enumeration oracles for the utility estimators and the planner.
Parameters are represented by support coordinates; ``support`` lists them and the
prior is a weight vector over the rows.
"""
from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import logsumexp

from .constraints import FeasibleBox
from .errors import InvalidInputError
from .tasks import Task

DISCRETE_TABLE = np.array(
    [
        [0.1, 0.1, 0.9, 0.9],
        [0.2, 0.8, 0.2, 0.8],
        [0.2, 0.4, 0.6, 0.8],
    ]
)


def _bern_entropy(p):
    p = np.clip(p, 1e-300, 1.0)
    q = np.clip(1.0 - p, 1e-300, 1.0)
    return -(p * np.log(p) + q * np.log(q))


class FiniteParameterTask(Task):
    """Task whose parameter takes one of ``support`` rows with prior ``prior_weights``."""

    support: np.ndarray
    prior_weights: np.ndarray

    @property
    def prior_logweights(self):
        return np.log(self.prior_weights)

    def prior_sample(self, rng, n=None):
        idx = rng.choice(len(self.support), size=1 if n is None else n, p=self.prior_weights)
        out = self.support[idx]
        return out[0] if n is None else out

    def support_index(self, theta):
        theta = np.asarray(theta, dtype=float)
        d = np.sum((theta[..., None, :] - self.support) ** 2, axis=-1)
        return np.argmin(d, axis=-1)

    def support_loglik(self, y, x):
        """log p(y | x, theta_k) for every support point, shape ``batch + (K,)``."""
        y = np.asarray(y, dtype=float)[..., None]
        x = np.asarray(x, dtype=float)[..., None, :]
        return self.loglik(y, x, self.support)

    def posterior_logweights(self, xs, ys, logw=None):
        logw = self.prior_logweights if logw is None else np.asarray(logw, dtype=float)
        for x, y in zip(xs, ys):
            logw = logw + self.support_loglik(y, x)
        return logw - logsumexp(logw, axis=-1, keepdims=True)


class DiscreteBernoulliToy(FiniteParameterTask):
    """Three designs and four parameter values with Bernoulli outcomes.

    Designs are the indices {0, 1, 2} stored as a 1-vector; ``table[x, k]`` is the
    success probability under parameter value ``k``.
    """

    name = "toy_discrete"
    likelihood_kind = "bernoulli"
    default_horizon = 3

    def __init__(self, table=None, prior=None):
        self.table = DISCRETE_TABLE.copy() if table is None else np.asarray(table, dtype=float)
        n_designs, n_theta = self.table.shape
        self.design_dim = 1
        self.param_dim = 1
        self.design_box = FeasibleBox(np.zeros(1), np.full(1, n_designs - 1.0))
        self.support = np.arange(n_theta, dtype=float)[:, None]
        self.prior_weights = np.full(n_theta, 1.0 / n_theta) if prior is None else np.asarray(prior, float)

    def describe(self):
        return {"name": self.name, "table": self.table.tolist()}

    def prob(self, x, theta):
        xi = np.rint(np.asarray(x, dtype=float)[..., 0]).astype(int)
        ti = np.rint(np.asarray(theta, dtype=float)[..., 0]).astype(int)
        if np.any(xi < 0) or np.any(xi >= self.table.shape[0]):
            raise InvalidInputError("design index out of range")
        return self.table[xi, ti]

    def sample_noise(self, rng, shape=()):
        return rng.random(shape)

    def simulate(self, theta, x, noise):
        return (np.asarray(noise) < self.prob(x, theta)).astype(float)

    def loglik(self, y, x, theta):
        p = self.prob(x, theta)
        y = np.asarray(y, dtype=float)
        return np.where(y > 0.5, np.log(p), np.log1p(-p))

    def exact_eig(self, x, logw=None):
        """Mutual information between theta and one outcome at design ``x``."""
        logw = self.prior_logweights if logw is None else logw
        w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
        p_k = self.prob(np.asarray(x, dtype=float)[..., None, :], self.support)
        marginal = np.sum(w * p_k, axis=-1)
        return _bern_entropy(marginal) - np.sum(w * _bern_entropy(p_k), axis=-1)

    def exact_total_eig(self, designs, logw=None):
        """Mutual information between theta and the outcomes of a fixed design sequence."""
        logw = self.prior_logweights if logw is None else np.asarray(logw, float)
        designs = np.asarray(designs, dtype=float).reshape(-1, 1)
        total = 0.0
        for ys in itertools.product([0.0, 1.0], repeat=len(designs)):
            lik = sum(self.loglik(np.full(len(self.support), y), np.broadcast_to(x, (len(self.support), 1)), self.support)
                      for x, y in zip(designs, ys))
            log_joint = logw + lik
            log_marg = logsumexp(log_joint)
            total += float(np.sum(np.exp(log_joint) * (lik - log_marg)))
        return total


class GridGaussianToy(FiniteParameterTask):
    """Continuous 2-D designs, four candidate source locations, Gaussian outcomes.

    ``y ~ N(exp(-|x - theta|^2 / (2 w^2)), s^2)``.  The one-step EIG under a discrete
    belief is a 1-D integral, evaluated by fixed quadrature, which makes it an exact
    node utility for brute-force planning checks.
    """

    name = "toy_grid"
    likelihood_kind = "gaussian"
    default_horizon = 2

    def __init__(self, support=None, width=0.2, noise_std=0.25, n_quad=401):
        if support is None:
            support = [[0.25, 0.25], [0.75, 0.3], [0.3, 0.7], [0.7, 0.75]]
        self.support = np.asarray(support, dtype=float)
        self.prior_weights = np.full(len(self.support), 1.0 / len(self.support))
        self.width = float(width)
        self.noise_std = float(noise_std)
        self.design_dim = 2
        self.param_dim = 2
        self.design_box = FeasibleBox(np.zeros(2), np.ones(2))
        self._nodes = np.linspace(-6.0 * self.noise_std, 1.0 + 6.0 * self.noise_std, n_quad)

    def describe(self):
        return {"name": self.name, "support": self.support.tolist(), "width": self.width,
                "noise_std": self.noise_std}

    def mean(self, x, theta):
        d2 = np.sum((np.asarray(x, float) - np.asarray(theta, float)) ** 2, axis=-1)
        return np.exp(-d2 / (2 * self.width**2))

    def simulate(self, theta, x, noise):
        return self.mean(x, theta) + self.noise_std * np.asarray(noise)

    def loglik(self, y, x, theta):
        z = (np.asarray(y, float) - self.mean(x, theta)) / self.noise_std
        return -0.5 * z * z - math.log(self.noise_std) - 0.5 * math.log(2 * math.pi)

    def exact_eig(self, x, logw=None):
        """H[p(y | x)] - H[noise] by trapezoid quadrature on a fixed outcome grid."""
        logw = self.prior_logweights if logw is None else np.asarray(logw, float)
        logw = logw - logsumexp(logw, axis=-1, keepdims=True)
        mu = self.mean(np.asarray(x, float)[..., None, :], self.support)  # batch + (K,)
        y = self._nodes
        z = (y[:, None] - mu[..., None, :]) / self.noise_std  # batch + (Q, K)
        comp = -0.5 * z * z - math.log(self.noise_std) - 0.5 * math.log(2 * math.pi)
        log_p = logsumexp(comp + logw[..., None, :], axis=-1)
        integrand = -np.exp(log_p) * log_p
        h_mix = np.trapezoid(integrand, y, axis=-1)
        h_noise = 0.5 * math.log(2 * math.pi * math.e * self.noise_std**2)
        return h_mix - h_noise
