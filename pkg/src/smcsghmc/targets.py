"""Target distributions the sampler can be pointed at.

Every target exposes the same small surface used by the proposals and the
SMC driver:

``dim``
    number of parameters.
``log_likelihood(theta)``
    the term raised to ``1/T`` in the weight update.
``log_prior(theta)``
    log prior density (``0`` for an improper flat prior).
``grad_potential(theta, batch=None)``
    gradient of the potential ``U = -log likelihood - log prior``; stochastic
    targets use ``batch`` to form the mini-batch estimate.
``vectorized``
    whether the methods above accept a ``(J, dim)`` stack of particles.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import logsumexp, softmax

from .errors import ConfigError
from .model import MiniBatch, grad_neg_log_posterior_minibatch, shuffled_batches

GRID_COORDS = (-4.0, -2.0, 0.0, 2.0, 4.0)
GMM_VARIANCE = 0.3


def grid_means(coords=GRID_COORDS):
    xs, ys = np.meshgrid(coords, coords, indexing="ij")
    return np.column_stack([xs.ravel(), ys.ravel()])


class GmmTarget:
    """Equally weighted mixture of isotropic 2-D Gaussians on a square grid."""

    vectorized = True

    def __init__(self, means=None, variance=GMM_VARIANCE):
        self.means = grid_means() if means is None else np.asarray(means, dtype=np.float64)
        self.variance = float(variance)
        self.n_components = len(self.means)
        self.dim = self.means.shape[1]
        self._log_norm = -math.log(self.n_components) - 0.5 * self.dim * math.log(2 * math.pi * self.variance)

    def _component_logs(self, x):
        diff = x[..., None, :] - self.means
        return self._log_norm - 0.5 * np.sum(diff * diff, axis=-1) / self.variance, diff

    def log_density(self, x):
        x = np.asarray(x, dtype=np.float64)
        comp, _ = self._component_logs(x)
        return logsumexp(comp, axis=-1)

    def grad_log_density(self, x):
        # responsibilities come from a log-domain softmax so distant modes never underflow to 0/0
        x = np.asarray(x, dtype=np.float64)
        comp, diff = self._component_logs(x)
        resp = softmax(comp, axis=-1)
        return -np.sum(resp[..., None] * diff, axis=-2) / self.variance

    def log_likelihood(self, theta):
        return self.log_density(theta)

    def log_prior(self, theta):
        return np.zeros(np.shape(theta)[:-1]) if np.ndim(theta) > 1 else 0.0

    def grad_potential(self, theta, batch=None):
        return -self.grad_log_density(theta)

    def nearest_mode(self, x):
        x = np.atleast_2d(x)
        d2 = np.sum((x[:, None, :] - self.means) ** 2, axis=-1)
        return np.argmin(d2, axis=1)

    def sample(self, rng, n):
        """Exact i.i.d. draws; returns ``(points, component_index)``."""
        comp = rng.integers(self.n_components, size=n)
        pts = self.means[comp] + rng.normal(0.0, math.sqrt(self.variance), size=(n, self.dim))
        return pts, comp


def gmm_log_density(point, target=None):
    return (target or GmmTarget()).log_density(point)


def gmm_grad_log_density(point, target=None):
    return (target or GmmTarget()).grad_log_density(point)


class GaussianTarget:
    """Isotropic Gaussian ``N(0, variance I)``; with variance 1 the potential is ``|theta|^2 / 2``."""

    vectorized = True

    def __init__(self, dim, variance=1.0):
        self.dim = int(dim)
        self.variance = float(variance)

    def log_likelihood(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        return -0.5 * self.dim * math.log(2 * math.pi * self.variance) - 0.5 * np.sum(theta * theta, axis=-1) / self.variance

    def log_prior(self, theta):
        return np.zeros(np.shape(theta)[:-1]) if np.ndim(theta) > 1 else 0.0

    def grad_potential(self, theta, batch=None):
        return np.asarray(theta, dtype=np.float64) / self.variance


def tempered_log_likelihood(model, params, dataset, temperature):
    """``(1/T) * sum_d log p(y_d | x_d, theta)``; ``T = len(dataset)`` gives the mean."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return model.log_likelihood(params, dataset.features, dataset.labels) / temperature


class TemperedPosterior:
    """Neural-network posterior ``p(D | theta)^(1/T) q0(theta)`` over a labelled dataset.

    ``temperature=None`` means ``T = |D|``. The temperature only enters the
    weight update; proposals follow the untempered mini-batch gradient.
    """

    vectorized = False

    def __init__(self, model, prior, dataset, temperature=None):
        self.model = model
        self.prior = prior
        self.dataset = dataset
        self.temperature = float(len(dataset) if temperature is None else temperature)
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")

    @property
    def dim(self):
        return self.model.dim

    @property
    def dataset_size(self):
        return len(self.dataset)

    def log_likelihood(self, theta):
        return self.model.log_likelihood(theta, self.dataset.features, self.dataset.labels)

    def tempered_log_likelihood(self, theta, temperature=None):
        return tempered_log_likelihood(self.model, theta, self.dataset, temperature or self.temperature)

    def log_prior(self, theta):
        return float(self.prior.log_density(theta))

    def batch(self, indices):
        return MiniBatch.from_indices(self.dataset.features, self.dataset.labels, indices)

    def batches(self, batch_size, rng):
        return [self.batch(idx) for idx in shuffled_batches(self.dataset_size, batch_size, rng)]

    def grad_potential(self, theta, batch=None):
        if batch is None:
            batch = self.batch(np.arange(self.dataset_size))
        return grad_neg_log_posterior_minibatch(self.model, theta, batch, self.prior)
